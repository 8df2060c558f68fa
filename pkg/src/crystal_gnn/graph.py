"""Periodic atom graphs, bond (angle) graphs, and batch collation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .crystal import CrystalStructure


class GeometryError(ValueError):
    """The cell is degenerate or the cutoffs are inconsistent."""


@dataclass(frozen=True, eq=False)
class AtomGraph:
    """Directed edges ``i -> j`` within the atom cutoff.

    ``bond_vec[e] = r_i - (r_j + image[e] @ lattice)``; edges are sorted by
    their center atom ``edge_src``.
    """

    n_atoms: int
    atomic_numbers: np.ndarray
    lattice: np.ndarray
    frac_coords: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    neighbor_image: np.ndarray
    bond_vec: np.ndarray
    bond_len: np.ndarray

    @property
    def n_edges(self) -> int:
        return int(self.edge_src.shape[0])


@dataclass(frozen=True, eq=False)
class BondGraph:
    """Ordered pairs of distinct short edges ``(e_ij, e_ik)`` sharing center ``i``."""

    angle_edge_a: np.ndarray
    angle_edge_b: np.ndarray
    theta: np.ndarray

    @property
    def n_angles(self) -> int:
        return int(self.angle_edge_a.shape[0])


@dataclass(frozen=True, eq=False)
class GraphBatch:
    atomic_numbers: np.ndarray
    frac_coords: np.ndarray
    lattices: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    neighbor_image: np.ndarray
    angle_edge_a: np.ndarray
    angle_edge_b: np.ndarray
    atom_seg: np.ndarray
    edge_seg: np.ndarray
    angle_seg: np.ndarray
    n_atoms: np.ndarray
    n_edges: np.ndarray
    n_angles: np.ndarray
    bond_vec: np.ndarray
    bond_len: np.ndarray
    theta: np.ndarray

    @property
    def n_samples(self) -> int:
        return int(self.n_atoms.shape[0])

    @property
    def total_atoms(self) -> int:
        return int(self.atomic_numbers.shape[0])

    @property
    def total_edges(self) -> int:
        return int(self.edge_src.shape[0])

    @property
    def total_angles(self) -> int:
        return int(self.angle_edge_a.shape[0])


def image_range(lattice: np.ndarray, cutoff: float) -> np.ndarray:
    """Per-axis image reach ``ceil(cutoff / width)``.

    ``width`` is the spacing between opposite cell faces. For fractional
    differences in (-1, 1) any pair within ``cutoff`` has image index
    ``|n| < 1 + cutoff / width``, which this bound covers.
    """
    inv = np.linalg.inv(lattice)
    widths = 1.0 / np.linalg.norm(inv, axis=0)
    return np.ceil(cutoff / widths).astype(np.int64)


def _image_grid(reach: np.ndarray) -> np.ndarray:
    axes = [np.arange(-k, k + 1) for k in reach]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


def bond_angles(bond_vec: np.ndarray, edge_a: np.ndarray, edge_b: np.ndarray) -> np.ndarray:
    va, vb = bond_vec[edge_a], bond_vec[edge_b]
    cos = np.einsum("ij,ij->i", va, vb) / (
        np.linalg.norm(va, axis=1) * np.linalg.norm(vb, axis=1)
    )
    return np.arccos(np.clip(cos, -1.0, 1.0))


def _angle_pairs(edge_src: np.ndarray, short: np.ndarray, n_atoms: int):
    src = edge_src[short]
    counts = np.bincount(src, minlength=n_atoms)
    starts = np.r_[0, np.cumsum(counts)[:-1]]
    edge_a, edge_b = [], []
    for center in range(n_atoms):
        k = counts[center]
        if k < 2:
            continue
        local = short[starts[center] : starts[center] + k]
        a = np.repeat(local, k)
        b = np.tile(local, k)
        keep = a != b
        edge_a.append(a[keep])
        edge_b.append(b[keep])
    if not edge_a:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty.copy()
    return np.concatenate(edge_a), np.concatenate(edge_b)


def build_graph(
    s: CrystalStructure, r_cut_atom: float = 6.0, r_cut_bond: float = 3.0
) -> tuple[AtomGraph, BondGraph]:
    if r_cut_bond > r_cut_atom:
        raise GeometryError("bond cutoff must not exceed atom cutoff")
    lattice = s.lattice
    if np.linalg.det(lattice) <= 1e-8:
        raise GeometryError("degenerate lattice")
    cart = s.frac_coords @ lattice
    n = s.n_atoms
    images = _image_grid(image_range(lattice, r_cut_atom))
    shifts = images @ lattice
    # vec[i, k, j] = r_i - (r_j + shift_k)
    vec = cart[:, None, None, :] - (cart[None, None, :, :] + shifts[None, :, None, :])
    dist = np.linalg.norm(vec, axis=-1)
    mask = (dist > 0.0) & (dist <= r_cut_atom)
    src, k, dst = np.nonzero(mask)
    bond_vec = vec[src, k, dst]
    bond_len = dist[src, k, dst]
    atom_graph = AtomGraph(
        n_atoms=n,
        atomic_numbers=s.atomic_numbers,
        lattice=lattice,
        frac_coords=s.frac_coords,
        edge_src=src.astype(np.int64),
        edge_dst=dst.astype(np.int64),
        neighbor_image=images[k].astype(np.int64),
        bond_vec=bond_vec,
        bond_len=bond_len,
    )
    short = np.flatnonzero(bond_len <= r_cut_bond)
    edge_a, edge_b = _angle_pairs(atom_graph.edge_src, short, n)
    theta = bond_angles(bond_vec, edge_a, edge_b)
    return atom_graph, BondGraph(edge_a, edge_b, theta)


def feature_number(graphs: tuple[AtomGraph, BondGraph]) -> int:
    atom_graph, bond_graph = graphs
    return atom_graph.n_atoms + atom_graph.n_edges + bond_graph.n_angles


def batched_geometry(
    frac_coords, lattices, atom_seg, edge_seg, edge_src, edge_dst, neighbor_image,
    angle_edge_a, angle_edge_b,
):
    """Bond vectors, lengths and angles for a whole batch at once.

    Each atom and each neighbor image is multiplied only by its own sample's
    lattice, which is what a block-diagonal image matrix times the stacked
    lattices computes, without materialising the block-diagonal matrix.
    """
    cart = np.einsum("na,nab->nb", frac_coords, lattices[atom_seg])
    r_i = cart[edge_src]
    r_j = cart[edge_dst] + np.einsum("ea,eab->eb", neighbor_image, lattices[edge_seg])
    bond_vec = r_i - r_j
    bond_len = np.linalg.norm(bond_vec, axis=1)
    theta = bond_angles(bond_vec, angle_edge_a, angle_edge_b)
    return bond_vec, bond_len, theta


def serial_geometry(samples: Sequence[tuple[AtomGraph, BondGraph]]):
    """Per-sample loop over the same geometry; the reference for the batched path."""
    vecs, lens, thetas = [], [], []
    for atom_graph, bond_graph in samples:
        lattice = atom_graph.lattice
        cart = atom_graph.frac_coords @ lattice
        r_i = cart[atom_graph.edge_src]
        r_j = cart[atom_graph.edge_dst] + atom_graph.neighbor_image @ lattice
        r_ij = r_i - r_j
        vecs.append(r_ij)
        lens.append(np.linalg.norm(r_ij, axis=1))
        if bond_graph.n_angles:
            thetas.append(bond_angles(r_ij, bond_graph.angle_edge_a, bond_graph.angle_edge_b))
    cat = lambda xs, shape: np.concatenate(xs) if xs else np.zeros(shape)
    return cat(vecs, (0, 3)), cat(lens, (0,)), cat(thetas, (0,))


def collate(samples: Sequence[tuple[AtomGraph, BondGraph]]) -> GraphBatch:
    if not samples:
        raise ValueError("cannot collate an empty sequence")
    n_atoms = np.array([a.n_atoms for a, _ in samples], dtype=np.int64)
    n_edges = np.array([a.n_edges for a, _ in samples], dtype=np.int64)
    n_angles = np.array([b.n_angles for _, b in samples], dtype=np.int64)
    atom_off = np.r_[0, np.cumsum(n_atoms)[:-1]]
    edge_off = np.r_[0, np.cumsum(n_edges)[:-1]]
    b = len(samples)
    edge_src = np.concatenate([a.edge_src + o for (a, _), o in zip(samples, atom_off)])
    edge_dst = np.concatenate([a.edge_dst + o for (a, _), o in zip(samples, atom_off)])
    angle_a = np.concatenate([g.angle_edge_a + o for (_, g), o in zip(samples, edge_off)])
    angle_b = np.concatenate([g.angle_edge_b + o for (_, g), o in zip(samples, edge_off)])
    frac = np.concatenate([a.frac_coords for a, _ in samples])
    lattices = np.stack([a.lattice for a, _ in samples])
    images = np.concatenate([a.neighbor_image for a, _ in samples]).reshape(-1, 3)
    atom_seg = np.repeat(np.arange(b), n_atoms)
    edge_seg = np.repeat(np.arange(b), n_edges)
    angle_seg = np.repeat(np.arange(b), n_angles)
    edge_src, edge_dst = edge_src.astype(np.int64), edge_dst.astype(np.int64)
    angle_a, angle_b = angle_a.astype(np.int64), angle_b.astype(np.int64)
    bond_vec, bond_len, theta = batched_geometry(
        frac, lattices, atom_seg, edge_seg, edge_src, edge_dst, images, angle_a, angle_b
    )
    return GraphBatch(
        atomic_numbers=np.concatenate([a.atomic_numbers for a, _ in samples]),
        frac_coords=frac,
        lattices=lattices,
        edge_src=edge_src,
        edge_dst=edge_dst,
        neighbor_image=images.astype(np.int64),
        angle_edge_a=angle_a,
        angle_edge_b=angle_b,
        atom_seg=atom_seg,
        edge_seg=edge_seg,
        angle_seg=angle_seg,
        n_atoms=n_atoms,
        n_edges=n_edges,
        n_angles=n_angles,
        bond_vec=bond_vec,
        bond_len=bond_len,
        theta=theta,
    )
