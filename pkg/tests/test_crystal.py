import json

import numpy as np
import pytest

from crystal_gnn.crystal import (
    CrystalStructure,
    DatasetParseError,
    SplitMix64,
    ValidationError,
    dimer,
    generate_lj_toy,
    lj_labels,
    lj_pair,
    load_dataset,
    masses_for,
    shuffled_indices,
    split,
    write_dataset,
)

NACL = {
    "lattice": [[0.0, 2.82, 2.82], [2.82, 0.0, 2.82], [2.82, 2.82, 0.0]],
    "frac_coords": [[0, 0, 0], [0.5, 0.5, 0.5]],
    "atomic_numbers": [11, 17],
    "energy": -6.5,
}


def test_load_single_record(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps(NACL) + "\n")
    (s,) = load_dataset(path)
    assert s.n_atoms == 2
    assert s.energy == -6.5
    assert s.forces is None


def test_load_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert load_dataset(path) == []


def test_bad_force_rows_rejected(tmp_path):
    record = dict(NACL, forces=[[0, 0, 0]])
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps(record) + "\n")
    with pytest.raises(ValidationError):
        load_dataset(path)


def test_parse_error_names_line(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps(NACL) + "\n{not json\n")
    with pytest.raises(DatasetParseError, match=r"d\.jsonl:2:"):
        load_dataset(path)


def test_left_handed_lattice_rejected():
    with pytest.raises(ValidationError):
        CrystalStructure(-np.eye(3), [[0, 0, 0]], [1])


def test_atomic_number_range():
    with pytest.raises(ValidationError):
        CrystalStructure(np.eye(3), [[0, 0, 0]], [119])


def test_frac_coords_wrapped():
    s = CrystalStructure(np.eye(3), [[1.25, -0.25, 1.0]], [1])
    np.testing.assert_allclose(s.frac_coords, [[0.25, 0.75, 0.0]])
    assert np.all((s.frac_coords >= 0) & (s.frac_coords < 1))


def test_round_trip(tmp_path):
    data = generate_lj_toy(3, 4, seed=2)
    first = tmp_path / "a.jsonl"
    second = tmp_path / "b.jsonl"
    write_dataset(first, data)
    write_dataset(second, load_dataset(first))
    assert first.read_text() == second.read_text()
    back = load_dataset(first)
    for a, b in zip(data, back):
        np.testing.assert_array_equal(a.frac_coords, b.frac_coords)
        np.testing.assert_array_equal(a.forces, b.forces)
        assert a.energy == b.energy


def test_split_sizes():
    s = split(20, seed=5)
    assert (len(s.train), len(s.val), len(s.test)) == (18, 1, 1)
    s = split(1000, seed=5)
    assert (len(s.train), len(s.val), len(s.test)) == (900, 50, 50)
    assert sorted(s.train + s.val + s.test) == list(range(1000))


def test_split_deterministic():
    assert split(100, 9) == split(100, 9)
    assert split(100, 9).train != split(100, 10).train


def test_splitmix_reference_values():
    # first outputs of SplitMix64 seeded with 0, from the reference algorithm
    mix = SplitMix64(0)
    assert mix.next_u64() == 0xE220A8397B1DCDAF
    assert mix.next_u64() == 0x6E789E6AA1B965F4


def test_shuffle_is_permutation():
    idx = shuffled_indices(50, 3)
    assert sorted(idx) == list(range(50))


def test_lj_minimum_has_zero_force():
    r_min = 2 ** (1 / 6) * 2.0
    _, de = lj_pair(r_min, cutoff=np.inf)
    assert abs(de) < 1e-12
    _, forces, _ = lj_labels(dimer(r_min))
    # the cutoff shift does not change forces, only the truncation does
    assert np.abs(forces).max() < 1e-10


def test_lj_energy_at_sigma():
    energy, _, _ = lj_labels(dimer(2.0))
    assert energy == pytest.approx(4 * (3.0**-6 - 3.0**-12), abs=1e-12)
    assert energy == pytest.approx(0.005479, abs=1e-6)


def test_lj_forces_sum_to_zero():
    for s in generate_lj_toy(5, 8, seed=11):
        assert np.abs(s.forces.sum(axis=0)).max() < 1e-8


def test_lj_forces_are_negative_gradient():
    s = generate_lj_toy(1, 4, seed=3)[0]
    h = 1e-6
    numeric = np.zeros((s.n_atoms, 3))
    inv = np.linalg.inv(s.lattice)
    for i in range(s.n_atoms):
        for a in range(3):
            step = np.zeros((s.n_atoms, 3))
            step[i, a] = h
            up = CrystalStructure(s.lattice, s.frac_coords + step @ inv, s.atomic_numbers)
            down = CrystalStructure(s.lattice, s.frac_coords - step @ inv, s.atomic_numbers)
            numeric[i, a] = -(lj_labels(up)[0] - lj_labels(down)[0]) / (2 * h)
    np.testing.assert_allclose(s.forces, numeric, atol=1e-6)


def test_lj_stress_is_strain_derivative():
    s = generate_lj_toy(1, 4, seed=4)[0]
    h = 1e-6
    numeric = np.zeros((3, 3))
    for a in range(3):
        for b in range(3):
            strain = np.eye(3)
            strain[a, b] += h
            up = CrystalStructure(s.lattice @ strain, s.frac_coords, s.atomic_numbers)
            strain[a, b] -= 2 * h
            down = CrystalStructure(s.lattice @ strain, s.frac_coords, s.atomic_numbers)
            numeric[a, b] = (lj_labels(up)[0] - lj_labels(down)[0]) / (2 * h)
    numeric = numeric / s.volume * 160.21766208
    np.testing.assert_allclose(s.stress, numeric, rtol=1e-5, atol=1e-5)


def test_lj_translation_invariance():
    s = generate_lj_toy(1, 8, seed=6)[0]
    shifted = CrystalStructure(s.lattice, s.frac_coords + [0.31, 0.77, 0.05], s.atomic_numbers)
    assert abs(lj_labels(shifted)[0] - s.energy) < 1e-9


def test_toy_requires_two_atoms():
    with pytest.raises(ValueError):
        generate_lj_toy(1, 1, seed=0)


def test_masses():
    np.testing.assert_allclose(masses_for([1, 18]), [1.008, 39.948])
