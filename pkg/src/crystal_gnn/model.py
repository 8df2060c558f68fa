"""Interaction-block graph network with direct energy/force/stress/magmom heads.

Each block reads only layer-``t`` features: the atom, bond and angle updates
are independent of each other and can run in any order. Forces are predicted
as a sum of per-edge scalars times unit bond directions, so they rotate with
the structure without any derivative of the energy.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .basis import BasisConfig, batched_basis, fused_bond_projection, initial_frequencies
from .crystal import CrystalStructure
from .graph import GraphBatch, build_graph, collate
from .tensor import (
    DimensionError,
    Value,
    affine,
    gather,
    make_op,
    matmul,
    mul,
    parameter,
    reshape,
    segment_sum,
    silu,
    _layernorm_backward,
    _layernorm_forward,
    _segment_sum_array,
    _sigmoid,
)

HEAD_MODES = ("decoupled", "derivative-free-only-energy")


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    n_blocks: int = 3
    n_radial: int = 31
    n_angular: int = 31
    p: int = 8
    r_cut_atom: float = 6.0
    r_cut_bond: float = 3.0
    max_z: int = 94
    head_mode: str = "decoupled"
    energy_hidden: tuple[int, ...] = (64, 64)
    force_hidden: tuple[int, ...] = (256, 256)
    stress_hidden: tuple[int, ...] = (64,)
    magmom_hidden: tuple[int, ...] = (64,)
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d < 1 or self.n_blocks < 1:
            raise ValueError("d and n_blocks must be positive")
        if self.head_mode not in HEAD_MODES:
            raise ValueError(f"head_mode must be one of {HEAD_MODES}")
        for name in ("energy_hidden", "force_hidden", "stress_hidden", "magmom_hidden"):
            object.__setattr__(self, name, tuple(int(w) for w in getattr(self, name)))
        BasisConfig(self.n_radial, self.n_angular, self.p, self.r_cut_atom, self.r_cut_bond)

    @property
    def basis(self) -> BasisConfig:
        return BasisConfig(self.n_radial, self.n_angular, self.p, self.r_cut_atom, self.r_cut_bond)

    def to_dict(self) -> dict:
        out = asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown model config keys {sorted(unknown)}")
        return cls(**data)


Params = dict[str, Value]


# ---------------------------------------------------------------------------
# parameters


def _mlp_shapes(prefix: str, widths: Sequence[int]) -> list[tuple[str, tuple[int, int]]]:
    return [
        (f"{prefix}.{k}", (fan_in + 1, fan_out))
        for k, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:]))
    ]


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Every parameter name and shape, in creation order."""
    d = cfg.d
    shapes: dict[str, tuple[int, ...]] = {
        "atom_ref": (cfg.max_z,),
        "embedding": (cfg.max_z, d),
        "radial_frequencies": (cfg.n_radial,),
        "bond_projection": (cfg.n_radial + 1, 3 * d),
        "angle_projection": (cfg.n_angular + 1, d),
    }
    for t in range(cfg.n_blocks):
        gated = {"atom": 3 * d, "bond": 4 * d}
        # the last block's angle features are never read
        if t < cfg.n_blocks - 1:
            gated["angle"] = 4 * d
        for kind, fan_in in gated.items():
            shapes[f"block{t}.{kind}.fc"] = (fan_in + 1, 2 * d)
            shapes[f"block{t}.{kind}.ln_gain"] = (2 * d,)
            shapes[f"block{t}.{kind}.ln_offset"] = (2 * d,)
        shapes[f"block{t}.atom.out"] = (d, d)
        shapes[f"block{t}.bond.out"] = (d, d)
    heads = {
        "energy_head": (d, *cfg.energy_hidden, 1),
        "force_head": (d, *cfg.force_hidden, 1),
        "stress_head": (d, *cfg.stress_hidden, 9),
        "magmom_head": (d, *cfg.magmom_hidden, 1),
    }
    for prefix, widths in heads.items():
        shapes.update(_mlp_shapes(prefix, widths))
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    """Uniform ``+-sqrt(1/fan_in)`` weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(cfg).items():
        if name == "radial_frequencies":
            data = initial_frequencies(cfg.n_radial)
        elif name == "atom_ref":
            data = np.zeros(shape)
        elif name == "embedding":
            data = rng.uniform(-1.0, 1.0, size=shape)
        elif name.endswith("ln_gain"):
            data = np.ones(shape)
        elif name.endswith("ln_offset"):
            data = np.zeros(shape)
        elif name.endswith(".out"):
            bound = np.sqrt(1.0 / shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        else:
            fan_in = shape[0] - 1
            bound = np.sqrt(1.0 / fan_in)
            data = np.zeros(shape)
            data[:-1] = rng.uniform(-bound, bound, size=(fan_in, shape[1]))
        params[name] = parameter(data, name=name)
    return params


def param_census(params: Params) -> int:
    return int(sum(v.data.size for v in params.values()))


# ---------------------------------------------------------------------------
# gated MLP


def gated_tail(pre: Value, gain: Value, offset: Value, eps: float = 1e-5) -> Value:
    """``sigmoid(LN(gate)) * silu(LN(core))`` for ``pre = [core | gate]``.

    Both halves are normalized in one pass and share a single sigmoid
    evaluation; the SiLU of the core half reuses that sigmoid.
    """
    n, width = pre.shape
    if width % 2 or gain.shape != (width,) or offset.shape != (width,):
        raise DimensionError(f"gated input width {width} does not match norm parameters")
    d = width // 2
    xhat, inv = _layernorm_forward(pre.data.reshape(n, 2, d), eps)
    g2 = gain.data.reshape(2, d)
    y = xhat * g2 + offset.data.reshape(2, d)
    s = _sigmoid(y)
    core = y[:, 0] * s[:, 0]
    out = s[:, 1] * core

    def backward(g):
        y = xhat * g2 + offset.data.reshape(2, d)
        dy = np.empty_like(y)
        dy[:, 0] = g * s[:, 1] * (s[:, 0] + y[:, 0] * s[:, 0] * (1.0 - s[:, 0]))
        dy[:, 1] = g * y[:, 0] * s[:, 0] * s[:, 1] * (1.0 - s[:, 1])
        dgain = (dy * xhat).sum(axis=0).reshape(width)
        doffset = dy.sum(axis=0).reshape(width)
        dpre = _layernorm_backward(dy * g2, xhat, inv).reshape(n, width)
        return dpre, dgain, doffset

    return make_op(out, (pre, gain, offset), backward)


def gated_mlp(x: Value, fc: Value, gain: Value, offset: Value, eps: float = 1e-5) -> Value:
    """Core and gate branches from one fused linear of width ``2d``."""
    return gated_tail(affine(x, fc), gain, offset, eps)


def _split_linear(parts: Sequence[tuple[Value, np.ndarray | None]], fc: Value) -> Value:
    """``concat([p[idx] for p, idx in parts]) @ W + b`` without building the concat.

    Each part is projected by its own row block of ``fc`` before gathering, so
    atom-level parts are multiplied once per atom rather than once per edge.
    """
    bounds = np.cumsum([0] + [value.shape[1] for value, _ in parts])
    if bounds[-1] + 1 != fc.shape[0]:
        raise DimensionError(f"parts of width {bounds[-1]} do not match weights {fc.shape}")
    w = fc.data
    out = None
    for (value, index), lo, hi in zip(parts, bounds[:-1], bounds[1:]):
        projected = value.data @ w[lo:hi]
        if index is not None:
            projected = projected[index]
        if out is None:
            out = projected.copy() if index is None else projected
        else:
            out += projected
    out += w[-1]

    def backward(g):
        grads = [None] * len(parts)
        gw = np.empty_like(w)
        for k, ((value, index), lo, hi) in enumerate(zip(parts, bounds[:-1], bounds[1:])):
            gk = g if index is None else _segment_sum_array(g, index, value.shape[0])
            gw[lo:hi] = value.data.T @ gk
            if value.requires_grad:
                grads[k] = gk @ w[lo:hi].T
        gw[-1] = g.sum(axis=0)
        return (*grads, gw)

    return make_op(out, (*(value for value, _ in parts), fc), backward)


def _mlp(x: Value, params: Params, prefix: str, n_layers: int) -> Value:
    for k in range(n_layers):
        x = affine(x, params[f"{prefix}.{k}"])
        if k < n_layers - 1:
            x = silu(x)
    return x


# ---------------------------------------------------------------------------
# graph topology and interaction block


@dataclass(frozen=True, eq=False)
class Topology:
    """Index arrays the interaction block needs, derived once per batch."""

    n_atoms: int
    n_edges: int
    edge_src: np.ndarray
    edge_dst: np.ndarray
    angle_center: np.ndarray
    angle_edge_a: np.ndarray
    angle_edge_b: np.ndarray
    bond_edges: np.ndarray
    angle_local_a: np.ndarray
    angle_local_b: np.ndarray

    @classmethod
    def from_arrays(cls, n_atoms, edge_src, edge_dst, angle_edge_a, angle_edge_b) -> "Topology":
        edge_src = np.asarray(edge_src, dtype=np.int64)
        angle_edge_a = np.asarray(angle_edge_a, dtype=np.int64)
        angle_edge_b = np.asarray(angle_edge_b, dtype=np.int64)
        bond_edges = np.unique(np.concatenate([angle_edge_a, angle_edge_b]))
        return cls(
            n_atoms=int(n_atoms),
            n_edges=int(edge_src.shape[0]),
            edge_src=edge_src,
            edge_dst=np.asarray(edge_dst, dtype=np.int64),
            angle_center=edge_src[angle_edge_a],
            angle_edge_a=angle_edge_a,
            angle_edge_b=angle_edge_b,
            bond_edges=bond_edges,
            angle_local_a=np.searchsorted(bond_edges, angle_edge_a),
            angle_local_b=np.searchsorted(bond_edges, angle_edge_b),
        )

    @classmethod
    def from_batch(cls, batch: GraphBatch) -> "Topology":
        return cls.from_arrays(
            batch.total_atoms, batch.edge_src, batch.edge_dst,
            batch.angle_edge_a, batch.angle_edge_b,
        )


def _block_param(params: Params, t: int, kind: str):
    p = f"block{t}.{kind}"
    return params[f"{p}.fc"], params[f"{p}.ln_gain"], params[f"{p}.ln_offset"]


def atom_conv(v: Value, e: Value, ea: Value, topo: Topology, params: Params, t: int,
              eps: float = 1e-5) -> Value:
    """``v_i + W_out [sum_j ea_ij * phi([v_i, v_j, e_ij])]`` summed at the center atom."""
    fc, gain, offset = _block_param(params, t, "atom")
    pre = _split_linear([(v, topo.edge_src), (v, topo.edge_dst), (e, None)], fc)
    message = mul(ea, gated_tail(pre, gain, offset, eps))
    aggregated = segment_sum(message, topo.edge_src, topo.n_atoms)
    return v + matmul(aggregated, params[f"block{t}.atom.out"])


def _angle_input(v: Value, e: Value, a: Value, topo: Topology, fc: Value) -> Value:
    e_bond = gather(e, topo.bond_edges)
    return _split_linear(
        [(v, topo.angle_center), (e_bond, topo.angle_local_a),
         (e_bond, topo.angle_local_b), (a, None)],
        fc,
    )


def bond_conv(v: Value, e: Value, a: Value, eb: Value, topo: Topology, params: Params,
              t: int, eps: float = 1e-5) -> Value:
    """``e_ij + W_out [sum_k eb_ij * eb_ik * phi([v_i, e_ij, e_ik, a_ijk])]``."""
    if topo.angle_edge_a.size == 0:
        return e
    fc, gain, offset = _block_param(params, t, "bond")
    phi = gated_tail(_angle_input(v, e, a, topo, fc), gain, offset, eps)
    eb_bond = gather(eb, topo.bond_edges)
    weight = mul(gather(eb_bond, topo.angle_local_a), gather(eb_bond, topo.angle_local_b))
    aggregated = segment_sum(mul(weight, phi), topo.angle_local_a, topo.bond_edges.size)
    update = matmul(aggregated, params[f"block{t}.bond.out"])
    return e + _scatter_rows(update, topo.bond_edges, topo.n_edges)


def _scatter_rows(x: Value, index: np.ndarray, n: int) -> Value:
    """Place the rows of ``x`` at ``index`` in an otherwise zero ``n``-row array."""
    out = np.zeros((n,) + x.shape[1:])
    out[index] = x.data
    return make_op(out, (x,), lambda g: (g[index],))


def angle_update(v: Value, e: Value, a: Value, topo: Topology, params: Params, t: int,
                 eps: float = 1e-5) -> Value:
    """``a_ijk + phi([v_i, e_ij, e_ik, a_ijk])``."""
    if topo.angle_edge_a.size == 0:
        return a
    fc, gain, offset = _block_param(params, t, "angle")
    return a + gated_tail(_angle_input(v, e, a, topo, fc), gain, offset, eps)


# ---------------------------------------------------------------------------
# heads


def energy_head(v: Value, atom_seg: np.ndarray, n_samples: int, params: Params,
                cfg: ModelConfig, atomic_numbers: np.ndarray | None = None) -> Value:
    """``sum_i MLP(v_i)`` per sample, plus per-element reference energies when given."""
    per_atom = reshape(_mlp(v, params, "energy_head", len(cfg.energy_hidden) + 1), (v.shape[0],))
    if atomic_numbers is not None:
        per_atom = per_atom + gather(params["atom_ref"], atomic_numbers - 1)
    return segment_sum(per_atom, atom_seg, n_samples)


def force_head(e: Value, bond_vec: np.ndarray, edge_src: np.ndarray, n_atoms: int,
               params: Params, cfg: ModelConfig) -> Value:
    """``F_i = sum_j n(e_ij) * r_ij / |r_ij|`` with a scalar magnitude per edge."""
    magnitude = _mlp(e, params, "force_head", len(cfg.force_hidden) + 1)
    unit = bond_vec / np.linalg.norm(bond_vec, axis=1, keepdims=True)
    return segment_sum(mul(magnitude, Value(unit)), edge_src, n_atoms)


def lattice_direction_outer(lattices: np.ndarray) -> np.ndarray:
    """``sum_ij Lhat_i (x) Lhat_j`` for each stacked 3x3 lattice."""
    unit = lattices / np.linalg.norm(lattices, axis=2, keepdims=True)
    total = unit.sum(axis=1)
    return np.einsum("ba,bc->bac", total, total)


def stress_head(v: Value, lattices: np.ndarray, atom_seg: np.ndarray, n_atoms: np.ndarray,
                params: Params, cfg: ModelConfig) -> Value:
    """``sum_i (MLP(v_i) / N) * G`` per sample, with ``G`` from the lattice directions."""
    per_atom = _mlp(v, params, "stress_head", len(cfg.stress_hidden) + 1)
    weights = (1.0 / n_atoms)[atom_seg][:, None]
    summed = segment_sum(mul(per_atom, Value(weights)), atom_seg, len(n_atoms))
    g = lattice_direction_outer(lattices).reshape(-1, 9)
    return reshape(mul(summed, Value(g)), (len(n_atoms), 3, 3))


def magmom_head(v: Value, params: Params, cfg: ModelConfig) -> Value:
    out = _mlp(v, params, "magmom_head", len(cfg.magmom_hidden) + 1)
    return reshape(out, (v.shape[0],))


# ---------------------------------------------------------------------------
# full forward


@dataclass(eq=False)
class BatchOutput:
    energy: Value
    forces: Value
    stress: Value
    magmoms: Value
    n_atoms: np.ndarray
    atom_seg: np.ndarray


@dataclass(frozen=True, eq=False)
class Prediction:
    energy: float
    energy_per_atom: float
    forces: np.ndarray
    stress: np.ndarray
    magmoms: np.ndarray


def embed(batch: GraphBatch, params: Params, cfg: ModelConfig):
    z = batch.atomic_numbers
    if z.size and z.max() > cfg.max_z:
        raise ValueError(f"atomic number {z.max()} exceeds max_z={cfg.max_z}")
    v = gather(params["embedding"], z - 1)
    radial, angular = batched_basis(batch, params["radial_frequencies"], cfg.basis)
    e, ea, eb = fused_bond_projection(radial, params["bond_projection"])
    a = affine(Value(angular), params["angle_projection"])
    return v, e, ea, eb, a


def forward(batch: GraphBatch, params: Params, cfg: ModelConfig) -> BatchOutput:
    topo = Topology.from_batch(batch)
    v, e, ea, eb, a = embed(batch, params, cfg)
    eps = cfg.ln_eps
    for t in range(cfg.n_blocks):
        v_next = atom_conv(v, e, ea, topo, params, t, eps)
        e_next = bond_conv(v, e, a, eb, topo, params, t, eps)
        if t < cfg.n_blocks - 1:
            a = angle_update(v, e, a, topo, params, t, eps)
        v, e = v_next, e_next
    n = batch.n_samples
    return BatchOutput(
        energy=energy_head(v, batch.atom_seg, n, params, cfg, batch.atomic_numbers),
        forces=force_head(e, batch.bond_vec, batch.edge_src, batch.total_atoms, params, cfg),
        stress=stress_head(v, batch.lattices, batch.atom_seg, batch.n_atoms, params, cfg),
        magmoms=magmom_head(v, params, cfg),
        n_atoms=batch.n_atoms,
        atom_seg=batch.atom_seg,
    )


def split_predictions(out: BatchOutput) -> list[Prediction]:
    bounds = np.r_[0, np.cumsum(out.n_atoms)]
    preds = []
    for b, (lo, hi) in enumerate(zip(bounds[:-1], bounds[1:])):
        energy = float(out.energy.data[b])
        preds.append(
            Prediction(
                energy=energy,
                energy_per_atom=energy / (hi - lo),
                forces=out.forces.data[lo:hi].copy(),
                stress=out.stress.data[b].copy(),
                magmoms=out.magmoms.data[lo:hi].copy(),
            )
        )
    return preds


def predict(structures: Sequence[CrystalStructure], params: Params,
            cfg: ModelConfig) -> list[Prediction]:
    graphs = [build_graph(s, cfg.r_cut_atom, cfg.r_cut_bond) for s in structures]
    return split_predictions(forward(collate(graphs), params, cfg))


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"CGNNCKPT"


class CheckpointError(ValueError):
    """A checkpoint is unreadable or does not match the model configuration."""


def save_checkpoint(path: str | Path, params: Params, cfg: ModelConfig,
                    extra: dict[str, np.ndarray] | None = None, meta: dict | None = None) -> None:
    """Write a JSON manifest followed by little-endian float64 payloads.

    Layout: 8-byte magic, uint64 manifest length, UTF-8 JSON manifest, payload.
    Manifest entries are ``{name, shape, dtype: "f64", offset, length}`` with
    ``offset``/``length`` in bytes relative to the start of the payload.
    """
    tensors = {name: v.data for name, v in params.items()}
    for name, arr in (extra or {}).items():
        tensors[name] = np.asarray(arr, dtype=np.float64)
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        raw = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f64",
                        "offset": offset, "length": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps(
        {"config": cfg.to_dict(), "tensors": entries, "meta": meta or {}}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for raw in chunks:
            fh.write(raw)


def read_checkpoint(path: str | Path) -> tuple[ModelConfig, dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != _MAGIC or len(blob) < 16:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (length,) = struct.unpack("<Q", blob[8:16])
    try:
        manifest = json.loads(blob[16 : 16 + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    payload = memoryview(blob)[16 + length :]
    tensors = {}
    try:
        cfg = ModelConfig.from_dict(manifest["config"])
        for entry in manifest["tensors"]:
            if entry["dtype"] != "f64":
                raise CheckpointError(f"{entry['name']}: unsupported dtype {entry['dtype']}")
            lo, hi = entry["offset"], entry["offset"] + entry["length"]
            if hi > len(payload):
                raise CheckpointError(f"{path}: truncated payload")
            arr = np.frombuffer(payload[lo:hi], dtype="<f8").astype(np.float64)
            tensors[entry["name"]] = arr.reshape(entry["shape"])
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: invalid manifest ({exc})") from exc
    return cfg, tensors, manifest.get("meta", {})


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, Params]:
    cfg, tensors, _ = read_checkpoint(path)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {name}")
        if tuple(tensors[name].shape) != tuple(shape):
            raise CheckpointError(
                f"{path}: {name} has shape {tensors[name].shape}, expected {shape}"
            )
        params[name] = parameter(tensors[name], name=name)
    return cfg, params
