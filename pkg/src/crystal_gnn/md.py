"""NVE velocity-Verlet dynamics driven by the model's direct force head."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .crystal import CrystalStructure, masses_for
from .graph import build_graph, collate
from .model import ModelConfig, Params, forward

log = logging.getLogger(__name__)

# 1 eV / (Å amu) expressed in Å / fs^2
ACCEL_UNIT = 9.648533212e-3
# amu Å^2 / fs^2 expressed in eV
KINETIC_UNIT = 1.0 / ACCEL_UNIT
MIN_PAIR_DISTANCE = 0.1


class BlowUpError(RuntimeError):
    """Two atoms came closer than MIN_PAIR_DISTANCE."""

    def __init__(self, step: int, distance: float):
        super().__init__(f"atoms {distance:.4f} A apart at step {step}")
        self.step = step
        self.distance = distance


ForceFn = Callable[[CrystalStructure], tuple[np.ndarray, float]]


@dataclass(frozen=True, eq=False)
class MDState:
    structure: CrystalStructure
    velocities: np.ndarray  # Å/fs
    masses: np.ndarray  # amu
    time_step: float = 1.0  # fs
    step_index: int = 0
    forces: np.ndarray | None = None  # cached F(t), eV/Å
    potential_energy: float | None = None

    def __post_init__(self):
        n = self.structure.n_atoms
        v = np.asarray(self.velocities, dtype=np.float64)
        m = np.asarray(self.masses, dtype=np.float64)
        if v.shape != (n, 3):
            raise ValueError(f"velocities must be ({n}, 3), got {v.shape}")
        if m.shape != (n,) or np.any(m <= 0):
            raise ValueError(f"masses must be {n} positive values")
        if not self.time_step > 0:
            raise ValueError("time_step must be positive")
        object.__setattr__(self, "velocities", v)
        object.__setattr__(self, "masses", m)

    @classmethod
    def start(cls, structure: CrystalStructure, velocities=None, time_step: float = 1.0) -> "MDState":
        v = np.zeros((structure.n_atoms, 3)) if velocities is None else velocities
        return cls(structure, v, masses_for(structure.atomic_numbers), time_step)

    def kinetic_energy(self) -> float:
        """Kinetic energy in eV."""
        return 0.5 * KINETIC_UNIT * float((self.masses[:, None] * self.velocities**2).sum())

    def momentum(self) -> np.ndarray:
        return (self.masses[:, None] * self.velocities).sum(axis=0)


def model_forces(params: Params, cfg: ModelConfig) -> ForceFn:
    """Force callback evaluating the model on a single structure."""

    def evaluate(structure: CrystalStructure) -> tuple[np.ndarray, float]:
        graph = build_graph(structure, cfg.r_cut_atom, cfg.r_cut_bond)
        _check_distances(graph[0].bond_len, -1)
        out = forward(collate([graph]), params, cfg)
        return out.forces.data.copy(), float(out.energy.data[0])

    return evaluate


def _check_distances(bond_len: np.ndarray, step: int) -> None:
    if bond_len.size and bond_len.min() < MIN_PAIR_DISTANCE:
        raise BlowUpError(step, float(bond_len.min()))


def _drift(structure: CrystalStructure, displacement: np.ndarray) -> CrystalStructure:
    frac = structure.frac_coords + displacement @ np.linalg.inv(structure.lattice)
    # labels describe the old geometry, so they are dropped
    return replace(structure, frac_coords=frac - np.floor(frac), energy=None, forces=None,
                   stress=None, magmoms=None)


def md_step(state: MDState, force_fn: ForceFn) -> MDState:
    """One velocity-Verlet step. ``force_fn`` returns (forces eV/Å, energy eV)."""
    dt = state.time_step
    forces, energy = state.forces, state.potential_energy
    if forces is None:
        forces, energy = _guarded(force_fn, state.structure, state.step_index)
    inv_m = ACCEL_UNIT / state.masses[:, None]
    v_half = state.velocities + 0.5 * dt * forces * inv_m
    moved = _drift(state.structure, v_half * dt)
    step = state.step_index + 1
    new_forces, new_energy = _guarded(force_fn, moved, step)
    v_new = v_half + 0.5 * dt * new_forces * inv_m
    return MDState(moved, v_new, state.masses, dt, step, new_forces, new_energy)


def _guarded(force_fn: ForceFn, structure: CrystalStructure, step: int):
    try:
        forces, energy = force_fn(structure)
    except BlowUpError as err:
        raise BlowUpError(step, err.distance) from None
    if not np.all(np.isfinite(forces)):
        raise FloatingPointError(f"non-finite forces at step {step}")
    return np.asarray(forces, dtype=np.float64), float(energy)


def frozen_forces(forces: np.ndarray) -> ForceFn:
    """Position-independent forces, for integrator checks."""
    forces = np.asarray(forces, dtype=np.float64)
    return lambda structure: (forces, 0.0)


def run(state: MDState, force_fn: ForceFn, n_steps: int,
        trajectory: str | Path | None = None) -> list[MDState]:
    """Integrate ``n_steps`` steps, optionally writing one JSONL snapshot per state."""
    if state.forces is None:
        forces, energy = _guarded(force_fn, state.structure, state.step_index)
        state = replace(state, forces=forces, potential_energy=energy)
    states = [state]
    handle = open(trajectory, "w") if trajectory is not None else None
    try:
        if handle:
            handle.write(json.dumps(snapshot(state)) + "\n")
        for _ in range(n_steps):
            state = md_step(state, force_fn)
            states.append(state)
            if handle:
                handle.write(json.dumps(snapshot(state)) + "\n")
    finally:
        if handle:
            handle.close()
    first, last = states[0], states[-1]
    if first.potential_energy is not None and last.potential_energy is not None:
        drift = (last.potential_energy + last.kinetic_energy()
                 - first.potential_energy - first.kinetic_energy())
        log.info("total energy drift over %d steps: %.6g eV", n_steps, drift)
    return states


def snapshot(state: MDState) -> dict:
    record = state.structure.to_record()
    record["velocities"] = state.velocities.tolist()
    record["step"] = state.step_index
    record["time_fs"] = state.step_index * state.time_step
    if state.potential_energy is not None:
        record["potential_energy"] = state.potential_energy
    record["kinetic_energy"] = state.kinetic_energy()
    return record


def pair_separation(state: MDState, i: int = 0, j: int = 1) -> float:
    """Minimum-image distance between atoms i and j."""
    s = state.structure
    delta = s.frac_coords[i] - s.frac_coords[j]
    delta -= np.round(delta)
    return float(np.linalg.norm(delta @ s.lattice))


# ---------------------------------------------------------------------------
# timing


@dataclass(frozen=True)
class BenchResult:
    n_atoms: int
    step_times: tuple[float, ...]

    @property
    def mean(self) -> float:
        return float(np.mean(self.step_times))

    @property
    def min(self) -> float:
        return float(np.min(self.step_times))

    @property
    def max(self) -> float:
        return float(np.max(self.step_times))

    @property
    def cv(self) -> float:
        return float(np.std(self.step_times) / np.mean(self.step_times))


WARMUP_STEPS = 3


def bench_inference(structure: CrystalStructure, params: Params, cfg: ModelConfig,
                    n_steps: int = 10, time_step: float = 1.0) -> BenchResult:
    """Wall time of full MD steps; the first three are warmup and dropped."""
    if n_steps < 10:
        raise ValueError("n_steps must be at least 10")
    force_fn = model_forces(params, cfg)
    state = MDState.start(structure, time_step=time_step)
    times = []
    for _ in range(n_steps):
        t0 = time.perf_counter()
        state = md_step(replace(state, forces=None), force_fn)
        times.append(time.perf_counter() - t0)
    return BenchResult(structure.n_atoms, tuple(times[WARMUP_STEPS:]))


def write_bench_csv(path_or_file, results: Iterable[BenchResult]) -> None:
    own = isinstance(path_or_file, (str, Path))
    handle = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        writer = csv.writer(handle)
        writer.writerow(["n_atoms", "samples", "mean_s", "min_s", "max_s", "cv"])
        for r in results:
            writer.writerow([r.n_atoms, len(r.step_times), repr(r.mean), repr(r.min),
                             repr(r.max), repr(r.cv)])
    finally:
        if own:
            handle.close()


def initial_velocities(masses: Sequence[float], temperature: float, seed: int = 0) -> np.ndarray:
    """Maxwell-Boltzmann velocities (Å/fs) with the centre-of-mass drift removed."""
    kb = 8.617333262e-5  # eV/K
    m = np.asarray(masses, dtype=np.float64)
    rng = np.random.default_rng(seed)
    sigma = np.sqrt(kb * temperature * ACCEL_UNIT / m)
    v = rng.normal(size=(m.size, 3)) * sigma[:, None]
    v -= (m[:, None] * v).sum(axis=0) / m.sum()
    return v
