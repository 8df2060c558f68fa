"""Multi-task Huber training with Adam, cosine annealing and in-process data parallelism."""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .crystal import CrystalStructure, EV_PER_A3_TO_GPA, SplitMix64, shuffled_indices
from .graph import AtomGraph, BondGraph, GraphBatch, build_graph, collate, feature_number
from .model import (
    BatchOutput,
    ModelConfig,
    Params,
    forward,
    init_params,
    lattice_direction_outer,
    read_checkpoint,
    save_checkpoint,
)
from .sampler import SampleLoad, balance_assign
from .tensor import ContractError, Value, backward, huber, mul, scale, total

log = logging.getLogger(__name__)

TASKS = ("energy", "force", "stress", "magmom")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    global_batch: int = 128
    workers: int = 1
    base_lr: float = 3e-4
    lr_k: int = 128
    huber_delta: float = 0.1
    energy_weight: float = 2.0
    force_weight: float = 1.5
    stress_weight: float = 0.1
    magmom_weight: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_steps: int = 0
    seed: int = 0
    prefetch: bool = True
    balance: bool = True
    data_init: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.global_batch < 1 or self.workers < 1 or self.lr_k < 1:
            raise ValueError("epochs, global_batch, workers and lr_k must be positive")
        if min(self.energy_weight, self.force_weight, self.stress_weight, self.magmom_weight) < 0:
            raise ValueError("loss prefactors must be non-negative")

    @property
    def prefactors(self) -> dict[str, float]:
        return {
            "energy": self.energy_weight,
            "force": self.force_weight,
            "stress": self.stress_weight,
            "magmom": self.magmom_weight,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown train config keys {sorted(unknown)}")
        return cls(**data)


# ---------------------------------------------------------------------------
# learning rate


def initial_lr(global_batch: int, base: float = 3e-4, k: int = 128) -> float:
    """Learning rate scaled linearly with the global batch size."""
    if k <= 0:
        raise ValueError("k must be positive")
    return global_batch / k * base


def cosine_lr(step: int, total_steps: int, init_lr: float) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return init_lr
    return max(0.0, init_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps)))


# ---------------------------------------------------------------------------
# labels and loss


@dataclass(frozen=True, eq=False)
class BatchLabels:
    energy_per_atom: np.ndarray
    energy_mask: np.ndarray
    forces: np.ndarray
    force_mask: np.ndarray
    stress: np.ndarray
    stress_mask: np.ndarray
    magmoms: np.ndarray
    magmom_mask: np.ndarray

    @classmethod
    def from_structures(cls, structures: Sequence[CrystalStructure]) -> "BatchLabels":
        def stack(getter, shape):
            values = [getter(s) for s in structures]
            mask = np.array([v is not None for v in values], dtype=np.float64)
            filled = [np.zeros(shape(s)) if v is None else v for v, s in zip(values, structures)]
            return filled, mask

        energies, e_mask = stack(
            lambda s: None if s.energy is None else np.array(s.energy / s.n_atoms), lambda s: ()
        )
        forces, f_mask = stack(lambda s: s.forces, lambda s: (s.n_atoms, 3))
        stress, s_mask = stack(lambda s: s.stress, lambda s: (3, 3))
        magmoms, m_mask = stack(lambda s: s.magmoms, lambda s: (s.n_atoms,))
        counts = np.array([s.n_atoms for s in structures])
        return cls(
            energy_per_atom=np.array(energies, dtype=np.float64).reshape(-1),
            energy_mask=e_mask,
            forces=np.concatenate(forces).reshape(-1, 3),
            force_mask=np.repeat(f_mask, counts),
            stress=np.array(stress, dtype=np.float64).reshape(-1, 3, 3),
            stress_mask=s_mask,
            magmoms=np.concatenate(magmoms).reshape(-1),
            magmom_mask=np.repeat(m_mask, counts),
        )

    def counts(self) -> dict[str, float]:
        """Number of labeled scalar components per task."""
        return {
            "energy": float(self.energy_mask.sum()),
            "force": 3.0 * float(self.force_mask.sum()),
            "stress": 9.0 * float(self.stress_mask.sum()),
            "magmom": float(self.magmom_mask.sum()),
        }


def _residuals(out: BatchOutput, labels: BatchLabels):
    per_atom = mul(out.energy, Value(1.0 / out.n_atoms))
    return {
        "energy": (per_atom - labels.energy_per_atom, labels.energy_mask),
        "force": (out.forces - labels.forces, labels.force_mask[:, None]),
        "stress": (out.stress - labels.stress, labels.stress_mask[:, None, None]),
        "magmom": (out.magmoms - labels.magmoms, labels.magmom_mask),
    }


def loss(
    out: BatchOutput,
    labels: BatchLabels,
    prefactors: dict[str, float],
    delta: float = 0.1,
    normalizers: dict[str, float] | None = None,
    tasks: Sequence[str] = TASKS,
) -> tuple[Value, dict[str, float], dict[str, float]]:
    """Weighted sum of mean Huber losses per task.

    Each task's Huber sum is divided by ``normalizers[task]``, the number of
    labeled components in the *global* batch, so per-worker losses add up to
    the single-worker loss. Returns ``(total, per-task loss, per-task abs-error sums)``.
    """
    counts = labels.counts()
    normalizers = normalizers or counts
    active = [t for t in tasks if counts[t] > 0 and prefactors.get(t, 0.0) > 0]
    if not any(counts[t] > 0 for t in tasks):
        raise ContractError("no labels present for any weighted task")
    total_loss = None
    components: dict[str, float] = {}
    abs_sums: dict[str, float] = {}
    for task, (residual, mask) in _residuals(out, labels).items():
        abs_sums[task] = float((np.abs(residual.data) * mask).sum())
        if task not in active:
            components[task] = 0.0
            continue
        term = scale(
            total(mul(huber(residual, delta), Value(np.broadcast_to(mask, residual.shape)))),
            prefactors[task] / normalizers[task],
        )
        components[task] = float(term.data)
        total_loss = term if total_loss is None else total_loss + term
    if total_loss is None:
        total_loss = Value(np.array(0.0))
    return total_loss, components, abs_sums


# ---------------------------------------------------------------------------
# optimizer


@dataclass(eq=False)
class TrainState:
    params: Params
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 0

    @classmethod
    def fresh(cls, params: Params) -> "TrainState":
        return cls(
            params=params,
            m={k: np.zeros_like(p.data) for k, p in params.items()},
            v={k: np.zeros_like(p.data) for k, p in params.items()},
        )


def adam_step(state: TrainState, grads: dict[str, np.ndarray], lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> TrainState:
    """Bias-corrected Adam update, in place on the parameter arrays."""
    for name, g in grads.items():
        if g.shape != state.params[name].shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, g in grads.items():
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        state.params[name].data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def save_state(path: str | Path, state: TrainState, cfg: ModelConfig) -> None:
    extra = {}
    for name in state.params:
        extra[f"adam_m/{name}"] = state.m[name]
        extra[f"adam_v/{name}"] = state.v[name]
    save_checkpoint(path, state.params, cfg, extra=extra,
                    meta={"step": state.step, "epoch": state.epoch})


def load_state(path: str | Path) -> tuple[TrainState, ModelConfig]:
    from .model import load_checkpoint

    cfg, params = load_checkpoint(path)
    _, tensors, meta = read_checkpoint(path)
    return TrainState(
        params=params,
        m={k: tensors[f"adam_m/{k}"] for k in params},
        v={k: tensors[f"adam_v/{k}"] for k in params},
        step=int(meta["step"]),
        epoch=int(meta["epoch"]),
    ), cfg


# ---------------------------------------------------------------------------
# data-parallel step


@dataclass(frozen=True, eq=False)
class Shard:
    batch: GraphBatch
    labels: BatchLabels


@dataclass(frozen=True, eq=False)
class GraphDataset:
    """Structures with their prebuilt graphs."""

    structures: list[CrystalStructure]
    graphs: list[tuple[AtomGraph, BondGraph]]

    @classmethod
    def build(cls, structures: Sequence[CrystalStructure], cfg: ModelConfig) -> "GraphDataset":
        structures = list(structures)
        return cls(structures, [build_graph(s, cfg.r_cut_atom, cfg.r_cut_bond) for s in structures])

    def __len__(self) -> int:
        return len(self.structures)

    def loads(self, indices: Sequence[int]) -> list[SampleLoad]:
        return [SampleLoad(k, feature_number(self.graphs[k])) for k in indices]

    def shard(self, indices: Sequence[int]) -> Shard:
        return Shard(
            collate([self.graphs[k] for k in indices]),
            BatchLabels.from_structures([self.structures[k] for k in indices]),
        )


def worker_threads() -> int:
    cap = os.environ.get("CRYSTAL_GNN_THREADS")
    if cap:
        return max(1, int(cap))
    return os.cpu_count() or 1


def prepare_step(data: GraphDataset, indices: Sequence[int], workers: int,
                 balance: bool = True) -> list[Shard]:
    """Split one global batch into per-worker shards."""
    if balance:
        groups = balance_assign(data.loads(indices), workers).workers
    else:
        groups = [list(c) for c in np.array_split(np.asarray(indices), workers)]
    return [data.shard(g) for g in groups if len(g)]


def _worker_pass(shard: Shard, params: Params, model_cfg: ModelConfig, cfg: TrainConfig,
                 normalizers: dict[str, float]):
    # private leaves sharing the parameter arrays keep gradients per worker
    local = {k: Value(p.data, requires_grad=True, name=k) for k, p in params.items()}
    out = forward(shard.batch, local, model_cfg)
    tasks = TASKS if model_cfg.head_mode == "decoupled" else ("energy", "magmom")
    total_loss, components, abs_sums = loss(
        out, shard.labels, cfg.prefactors, cfg.huber_delta, normalizers, tasks
    )
    backward(total_loss, local.values())
    grads = {k: v.grad for k, v in local.items()}
    return grads, float(total_loss.data), components, abs_sums, shard.labels.counts()


def parallel_gradients(shards: Sequence[Shard], params: Params, model_cfg: ModelConfig,
                       cfg: TrainConfig, pool: ThreadPoolExecutor | None = None):
    """Gradients of the global-batch loss, reduced across workers in worker order."""
    normalizers = {t: 0.0 for t in TASKS}
    for s in shards:
        for t, c in s.labels.counts().items():
            normalizers[t] += c
    normalizers = {t: max(c, 1.0) for t, c in normalizers.items()}
    run = lambda shard: _worker_pass(shard, params, model_cfg, cfg, normalizers)
    try:
        results = list(pool.map(run, shards)) if pool else [run(s) for s in shards]
    except Exception as exc:
        raise RuntimeError(f"worker failed during forward/backward: {exc}") from exc
    grads = {k: np.zeros_like(p.data) for k, p in params.items()}
    loss_value = 0.0
    abs_sums = {t: 0.0 for t in TASKS}
    counts = {t: 0.0 for t in TASKS}
    for g, value, _, sums, c in results:
        for k in grads:
            grads[k] += g[k]
        loss_value += value
        for t in TASKS:
            abs_sums[t] += sums[t]
            counts[t] += c[t]
    return grads, loss_value, abs_sums, counts


def _prefetched(prepare, steps: Sequence, enabled: bool) -> Iterator:
    """Yield ``prepare(step)`` for each step, building the next one in the background."""
    if not enabled:
        for s in steps:
            yield prepare(s)
        return
    with ThreadPoolExecutor(max_workers=1) as loader:
        pending = loader.submit(prepare, steps[0]) if steps else None
        for k in range(len(steps)):
            current = pending.result()
            pending = loader.submit(prepare, steps[k + 1]) if k + 1 < len(steps) else None
            yield current


# ---------------------------------------------------------------------------
# metrics and epochs

# scale abs-error sums to meV/atom, meV/Å, GPa, μB
_MAE_UNITS = {"energy": 1000.0, "force": 1000.0, "stress": 1.0, "magmom": 1.0}


def maes(abs_sums: dict[str, float], counts: dict[str, float]) -> dict[str, float]:
    return {
        t: (abs_sums[t] / counts[t] * _MAE_UNITS[t]) if counts[t] else float("nan")
        for t in TASKS
    }


def evaluate(params: Params, model_cfg: ModelConfig, data: GraphDataset,
             batch_size: int = 64) -> dict[str, float]:
    abs_sums = {t: 0.0 for t in TASKS}
    counts = {t: 0.0 for t in TASKS}
    frozen = {k: Value(p.data) for k, p in params.items()}
    for lo in range(0, len(data), batch_size):
        shard = data.shard(range(lo, min(lo + batch_size, len(data))))
        out = forward(shard.batch, frozen, model_cfg)
        for task, (residual, mask) in _residuals(out, shard.labels).items():
            abs_sums[task] += float((np.abs(residual.data) * mask).sum())
        for t, c in shard.labels.counts().items():
            counts[t] += c
    return maes(abs_sums, counts)


def fit_output_init(params: Params, model_cfg: ModelConfig,
                    structures: Sequence[CrystalStructure]) -> None:
    """Least-squares starting values for the per-element energies and the stress bias.

    ``atom_ref`` gets the minimum-norm fit of total energy against element
    counts; the stress head's output bias gets, per component, the ``b``
    minimising ``sum_s (b * G_s - stress_s)^2``.
    """
    labeled = [s for s in structures if s.energy is not None]
    if labeled:
        counts = np.zeros((len(labeled), model_cfg.max_z))
        for row, s in enumerate(labeled):
            np.add.at(counts[row], s.atomic_numbers - 1, 1.0)
        energies = np.array([s.energy for s in labeled])
        ref, *_ = np.linalg.lstsq(counts, energies, rcond=None)
        params["atom_ref"].data[:] = ref
    stressed = [s for s in structures if s.stress is not None]
    if stressed and model_cfg.head_mode == "decoupled":
        g = lattice_direction_outer(np.stack([s.lattice for s in stressed])).reshape(-1, 9)
        target = np.stack([s.stress for s in stressed]).reshape(-1, 9)
        denom = (g * g).sum(axis=0)
        bias = np.divide((g * target).sum(axis=0), denom, out=np.zeros(9), where=denom > 1e-12)
        last = f"stress_head.{len(model_cfg.stress_hidden)}"
        params[last].data[-1] = bias


def epoch_order(n: int, seed: int, epoch: int) -> list[int]:
    mix = SplitMix64(seed)
    for _ in range(epoch + 1):
        epoch_seed = mix.next_u64()
    return shuffled_indices(n, epoch_seed)


def steps_per_epoch(n: int, global_batch: int) -> int:
    return math.ceil(n / global_batch)


def train_epoch(state: TrainState, data: GraphDataset, cfg: TrainConfig,
                model_cfg: ModelConfig, total_steps: int,
                val: GraphDataset | None = None) -> dict[str, float]:
    order = epoch_order(len(data), cfg.seed, state.epoch)
    batches = [order[lo : lo + cfg.global_batch] for lo in range(0, len(order), cfg.global_batch)]
    init = initial_lr(cfg.global_batch, cfg.base_lr, cfg.lr_k)
    prepare = lambda idx: prepare_step(data, idx, cfg.workers, cfg.balance)
    abs_sums = {t: 0.0 for t in TASKS}
    counts = {t: 0.0 for t in TASKS}
    first_lr = None
    threads = min(cfg.workers, worker_threads())
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for shards in _prefetched(prepare, batches, cfg.prefetch):
            grads, loss_value, sums, c = parallel_gradients(shards, state.params, model_cfg, cfg, pool)
            lr = cosine_lr(min(state.step, total_steps), total_steps, init)
            if cfg.warmup_steps and state.step < cfg.warmup_steps:
                lr *= (state.step + 1) / cfg.warmup_steps
            first_lr = lr if first_lr is None else first_lr
            adam_step(state, grads, lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
            for t in TASKS:
                abs_sums[t] += sums[t]
                counts[t] += c[t]
            log.debug("step %d loss %.6g lr %.3g", state.step, loss_value, lr)
    finally:
        if pool:
            pool.shutdown()
    state.epoch += 1
    metrics = {"epoch": state.epoch, "lr": first_lr}
    metrics.update({f"train_{t}_mae": v for t, v in maes(abs_sums, counts).items()})
    if val is not None and len(val):
        metrics.update({f"val_{t}_mae": v for t, v in evaluate(state.params, model_cfg, val).items()})
    return metrics


METRIC_FIELDS = ["epoch", "lr"] + [f"{s}_{t}_mae" for s in ("train", "val") for t in TASKS]


def train(structures: Sequence[CrystalStructure], cfg: TrainConfig, model_cfg: ModelConfig,
          out_dir: str | Path | None = None,
          val_structures: Sequence[CrystalStructure] = (),
          resume: TrainState | None = None,
          history: Sequence[dict] = ()) -> tuple[TrainState, list[dict]]:
    """Run ``cfg.epochs`` epochs, writing ``metrics.csv`` and per-epoch checkpoints to ``out_dir``.

    With ``resume`` the run continues from that state's epoch; since the
    shuffle order depends only on (seed, epoch), the result is bit-identical
    to an uninterrupted run. ``history`` holds the metric rows already written.
    """
    data = GraphDataset.build(structures, model_cfg)
    val = GraphDataset.build(val_structures, model_cfg) if len(val_structures) else None
    if not len(data):
        raise ValueError("training set is empty")
    if resume is None:
        params = init_params(model_cfg, cfg.seed)
        if cfg.data_init:
            fit_output_init(params, model_cfg, data.structures)
        state = TrainState.fresh(params)
    else:
        state = resume
    total_steps = cfg.epochs * steps_per_epoch(len(data), cfg.global_batch)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    history = list(history)
    while state.epoch < cfg.epochs:
        metrics = train_epoch(state, data, cfg, model_cfg, total_steps, val)
        history.append(metrics)
        log.info("epoch %d %s", state.epoch,
                 " ".join(f"{k}={v:.4g}" for k, v in metrics.items() if k != "epoch"))
        if out is not None:
            write_metrics(out / "metrics.csv", history)
            save_checkpoint(out / "checkpoints" / f"epoch_{state.epoch:03d}.ckpt",
                            state.params, model_cfg, meta={"epoch": state.epoch})
            save_state(out / "state.ckpt", state, model_cfg)
    if out is not None:
        save_checkpoint(out / "model.ckpt", state.params, model_cfg, meta={"epoch": state.epoch})
    return state, history


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    # empty cells are columns with no data (no validation set), left out of the row
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in row.items() if v != ""}
            for row in rows]


def write_metrics(path: str | Path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, extrasaction="ignore")
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v)
                             for k, v in row.items()})
