"""Crystal structures, JSONL datasets, splits and the Lennard-Jones toy oracle."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

EV_PER_A3_TO_GPA = 160.21766208

LJ_EPSILON = 1.0
LJ_SIGMA = 2.0
LJ_CUTOFF = 6.0


class ValidationError(ValueError):
    """A structure or record violates a data-model invariant."""


class DatasetParseError(ValueError):
    """A dataset line is not valid JSON or lacks required fields."""


@dataclass(frozen=True, eq=False)
class CrystalStructure:
    lattice: np.ndarray
    frac_coords: np.ndarray
    atomic_numbers: np.ndarray
    energy: float | None = None
    forces: np.ndarray | None = None
    stress: np.ndarray | None = None
    magmoms: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        lattice = np.array(self.lattice, dtype=np.float64)
        frac = np.array(self.frac_coords, dtype=np.float64).reshape(-1, 3)
        z = np.array(self.atomic_numbers, dtype=np.int64).reshape(-1)
        if lattice.shape != (3, 3):
            raise ValidationError(f"lattice must be 3x3, got {lattice.shape}")
        if not np.all(np.isfinite(lattice)) or np.linalg.det(lattice) <= 0:
            raise ValidationError("lattice must be right-handed and non-degenerate")
        if frac.shape[0] != z.shape[0]:
            raise ValidationError(
                f"{frac.shape[0]} coordinates but {z.shape[0]} atomic numbers"
            )
        if not np.all(np.isfinite(frac)):
            raise ValidationError("non-finite fractional coordinates")
        if z.size and (z.min() < 1 or z.max() > 118):
            raise ValidationError("atomic numbers must lie in 1..118")
        frac = frac - np.floor(frac)
        frac[frac >= 1.0] = 0.0
        n = z.shape[0]
        object.__setattr__(self, "lattice", lattice)
        object.__setattr__(self, "frac_coords", frac)
        object.__setattr__(self, "atomic_numbers", z)
        if self.energy is not None:
            object.__setattr__(self, "energy", float(self.energy))
        if self.forces is not None:
            forces = np.array(self.forces, dtype=np.float64)
            if forces.shape != (n, 3):
                raise ValidationError(f"forces must be ({n}, 3), got {forces.shape}")
            object.__setattr__(self, "forces", forces)
        if self.stress is not None:
            stress = np.array(self.stress, dtype=np.float64)
            if stress.shape != (3, 3):
                raise ValidationError(f"stress must be 3x3, got {stress.shape}")
            object.__setattr__(self, "stress", stress)
        if self.magmoms is not None:
            magmoms = np.array(self.magmoms, dtype=np.float64).reshape(-1)
            if magmoms.shape != (n,):
                raise ValidationError(f"magmoms must have {n} entries")
            object.__setattr__(self, "magmoms", magmoms)

    @property
    def n_atoms(self) -> int:
        return int(self.atomic_numbers.shape[0])

    @property
    def cart_coords(self) -> np.ndarray:
        return self.frac_coords @ self.lattice

    @property
    def volume(self) -> float:
        return float(np.linalg.det(self.lattice))

    def with_labels(self, **labels) -> "CrystalStructure":
        return replace(self, **labels)

    def to_record(self) -> dict:
        record = {
            "lattice": self.lattice.tolist(),
            "frac_coords": self.frac_coords.tolist(),
            "atomic_numbers": self.atomic_numbers.tolist(),
        }
        if self.energy is not None:
            record["energy"] = self.energy
        for key in ("forces", "stress", "magmoms"):
            value = getattr(self, key)
            if value is not None:
                record[key] = value.tolist()
        record.update(self.extra)
        return record

    @classmethod
    def from_record(cls, record: dict) -> "CrystalStructure":
        known = {"lattice", "frac_coords", "atomic_numbers", "energy", "forces", "stress", "magmoms"}
        missing = {"lattice", "frac_coords", "atomic_numbers"} - record.keys()
        if missing:
            raise DatasetParseError(f"missing fields {sorted(missing)}")
        extra = {k: v for k, v in record.items() if k not in known}
        return cls(
            lattice=record["lattice"],
            frac_coords=record["frac_coords"],
            atomic_numbers=record["atomic_numbers"],
            energy=record.get("energy"),
            forces=record.get("forces"),
            stress=record.get("stress"),
            magmoms=record.get("magmoms"),
            extra=extra,
        )


def load_dataset(path: str | Path) -> list[CrystalStructure]:
    """Read one structure per JSON line, in file order."""
    structures = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                if not isinstance(record, dict):
                    raise DatasetParseError("line is not a JSON object")
                structures.append(CrystalStructure.from_record(record))
            except json.JSONDecodeError as exc:
                raise DatasetParseError(f"{path}:{lineno}: {exc.msg}") from exc
            except DatasetParseError as exc:
                raise DatasetParseError(f"{path}:{lineno}: {exc}") from exc
            except ValidationError as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from exc
    return structures


def write_dataset(path: str | Path, structures: Iterable[CrystalStructure]) -> None:
    # repr of a Python float round-trips exactly (17 significant digits at most)
    with open(path, "w", encoding="utf-8") as fh:
        for s in structures:
            fh.write(json.dumps(s.to_record()) + "\n")


# ---------------------------------------------------------------------------
# deterministic splitting

_MASK64 = (1 << 64) - 1


class SplitMix64:
    """The SplitMix64 generator (Steele, Lea, Flood 2014) on Python ints."""

    def __init__(self, seed: int):
        self.state = seed & _MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
        return z ^ (z >> 31)

    def below(self, bound: int) -> int:
        """Uniform integer in ``[0, bound)`` by rejection."""
        limit = (1 << 64) - ((1 << 64) % bound)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % bound


def shuffled_indices(n: int, seed: int) -> list[int]:
    """Fisher-Yates shuffle of ``range(n)`` driven by SplitMix64."""
    rng = SplitMix64(seed)
    idx = list(range(n))
    for i in range(n - 1, 0, -1):
        j = rng.below(i + 1)
        idx[i], idx[j] = idx[j], idx[i]
    return idx


@dataclass(frozen=True)
class DatasetSplit:
    train: list[int]
    val: list[int]
    test: list[int]


def split(n: int, seed: int, ratios: tuple[float, float, float] = (0.9, 0.05, 0.05)) -> DatasetSplit:
    """Shuffle ``range(n)`` and cut it into train/val/test.

    Validation and test sizes are ``floor(ratio * n)``; training gets the rest.
    """
    if n < 1:
        raise ValueError("cannot split an empty dataset")
    idx = shuffled_indices(n, seed)
    n_val = int(math.floor(ratios[1] * n + 1e-9))
    n_test = int(math.floor(ratios[2] * n + 1e-9))
    n_train = n - n_val - n_test
    return DatasetSplit(
        train=idx[:n_train],
        val=idx[n_train : n_train + n_val],
        test=idx[n_train + n_val :],
    )


# ---------------------------------------------------------------------------
# Lennard-Jones oracle


def lj_pair(r, epsilon: float = LJ_EPSILON, sigma: float = LJ_SIGMA, cutoff: float = LJ_CUTOFF):
    """Energy-shifted LJ pair energy and its radial derivative, zero beyond ``cutoff``."""
    r = np.asarray(r, dtype=np.float64)
    sr6 = (sigma / r) ** 6
    src6 = (sigma / cutoff) ** 6
    shift = 4.0 * epsilon * (src6 * src6 - src6)
    inside = r < cutoff
    energy = np.where(inside, 4.0 * epsilon * (sr6 * sr6 - sr6) - shift, 0.0)
    denergy = np.where(inside, 4.0 * epsilon * (-12.0 * sr6 * sr6 + 6.0 * sr6) / r, 0.0)
    return energy, denergy


def _image_range(lattice: np.ndarray, cutoff: float) -> np.ndarray:
    inv = np.linalg.inv(lattice)
    # distance between opposite faces along lattice vector a is 1/|column a of L^-1|
    widths = 1.0 / np.linalg.norm(inv, axis=0)
    return np.ceil(cutoff / widths).astype(int)


def lj_labels(
    s: CrystalStructure,
    epsilon: float = LJ_EPSILON,
    sigma: float = LJ_SIGMA,
    cutoff: float = LJ_CUTOFF,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Energy (eV), forces (eV/Å) and stress (GPa) of a periodic LJ system.

    Stress is ``(1/V) dE/d(strain)``, so a compressed cell has negative
    diagonal stress.
    """
    pos = s.cart_coords
    n = s.n_atoms
    reach = _image_range(s.lattice, cutoff)
    grid = np.stack(
        np.meshgrid(*[np.arange(-k, k + 1) for k in reach], indexing="ij"), axis=-1
    ).reshape(-1, 3)
    shifts = grid @ s.lattice
    energy = 0.0
    forces = np.zeros((n, 3))
    virial = np.zeros((3, 3))
    for i in range(n):
        # r_ij = r_i - (r_j + shift), every periodic image of every j
        vec = pos[i][None, None, :] - (pos[None, :, :] + shifts[:, None, :])
        vec = vec.reshape(-1, 3)
        dist = np.linalg.norm(vec, axis=1)
        keep = (dist > 1e-12) & (dist < cutoff)
        vec, dist = vec[keep], dist[keep]
        e, de = lj_pair(dist, epsilon, sigma, cutoff)
        # each unordered pair is visited from both ends
        energy += 0.5 * e.sum()
        forces[i] = -(de / dist) @ vec
        virial += 0.5 * np.einsum("p,pa,pb->ab", de / dist, vec, vec)
    stress = virial / s.volume * EV_PER_A3_TO_GPA
    return float(energy), forces, stress


def generate_lj_toy(
    n_structures: int,
    atoms_per_cell: int,
    seed: int,
    element: int = 18,
    displacement: float = 0.05,
    strain: float = 0.02,
) -> list[CrystalStructure]:
    """Perturbed cubic cells of one element labeled by the LJ oracle.

    Atoms occupy randomly chosen sites of the smallest ``m**3`` simple-cubic
    grid that fits them, at the LJ pair-minimum spacing scaled by a random
    isotropic strain in ``[-strain, strain]``. Each atom is then displaced by
    an isotropic Gaussian of width ``displacement`` Å.
    """
    if atoms_per_cell < 2:
        raise ValueError("atoms_per_cell must be at least 2")
    rng = np.random.default_rng(seed)
    m = 1
    while m**3 < atoms_per_cell:
        m += 1
    sites = np.stack(
        np.meshgrid(*[np.arange(m)] * 3, indexing="ij"), axis=-1
    ).reshape(-1, 3) / m
    spacing = 2.0 ** (1.0 / 6.0) * LJ_SIGMA
    out = []
    for _ in range(n_structures):
        a = m * spacing * (1.0 + rng.uniform(-strain, strain))
        lattice = np.eye(3) * a
        chosen = np.sort(rng.choice(len(sites), size=atoms_per_cell, replace=False))
        frac = sites[chosen] + rng.normal(0.0, displacement, size=(atoms_per_cell, 3)) / a
        s = CrystalStructure(lattice, frac, np.full(atoms_per_cell, element))
        energy, forces, stress = lj_labels(s)
        out.append(s.with_labels(energy=energy, forces=forces, stress=stress,
                                 magmoms=np.zeros(atoms_per_cell)))
    return out


def dimer(separation: float, box: float = 20.0, element: int = 18) -> CrystalStructure:
    """Two atoms along x in a cubic box large enough to isolate them."""
    lattice = np.eye(3) * box
    frac = np.array([[0.25, 0.5, 0.5], [0.25 + separation / box, 0.5, 0.5]])
    return CrystalStructure(lattice, frac, np.full(2, element))


# Standard atomic weights (IUPAC, abridged), indexed by atomic number.
ATOMIC_MASSES = np.array([
    0.0, 1.008, 4.0026, 6.94, 9.0122, 10.81, 12.011, 14.007, 15.999, 18.998, 20.180,
    22.990, 24.305, 26.982, 28.085, 30.974, 32.06, 35.45, 39.948, 39.098, 40.078,
    44.956, 47.867, 50.942, 51.996, 54.938, 55.845, 58.933, 58.693, 63.546, 65.38,
    69.723, 72.630, 74.922, 78.971, 79.904, 83.798, 85.468, 87.62, 88.906, 91.224,
    92.906, 95.95, 97.0, 101.07, 102.91, 106.42, 107.87, 112.41, 114.82, 118.71,
    121.76, 127.60, 126.90, 131.29, 132.91, 137.33, 138.91, 140.12, 140.91, 144.24,
    145.0, 150.36, 151.96, 157.25, 158.93, 162.50, 164.93, 167.26, 168.93, 173.05,
    174.97, 178.49, 180.95, 183.84, 186.21, 190.23, 192.22, 195.08, 196.97, 200.59,
    204.38, 207.2, 208.98, 209.0, 210.0, 222.0, 223.0, 226.0, 227.0, 232.04,
    231.04, 238.03, 237.0, 244.0, 243.0, 247.0, 247.0, 251.0, 252.0, 257.0,
    258.0, 259.0, 262.0, 267.0, 270.0, 269.0, 270.0, 270.0, 278.0, 281.0,
    281.0, 285.0, 286.0, 289.0, 289.0, 293.0, 293.0, 294.0,
])


def masses_for(atomic_numbers: Sequence[int]) -> np.ndarray:
    return ATOMIC_MASSES[np.asarray(atomic_numbers, dtype=np.int64)]
