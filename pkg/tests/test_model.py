import json
import struct
import threading

import numpy as np
import pytest
from scipy.special import expit
from scipy.spatial.transform import Rotation

from crystal_gnn.crystal import CrystalStructure, dimer
from crystal_gnn.graph import build_graph, collate
from crystal_gnn.model import (
    CheckpointError,
    ModelConfig,
    Topology,
    _split_linear,
    angle_update,
    atom_conv,
    bond_conv,
    energy_head,
    forward,
    gated_mlp,
    init_params,
    lattice_direction_outer,
    load_checkpoint,
    magmom_head,
    param_census,
    param_shapes,
    predict,
    read_checkpoint,
    save_checkpoint,
    stress_head,
)
from crystal_gnn.tensor import (
    DimensionError,
    Value,
    affine,
    backward,
    concat,
    layernorm,
    mul,
    parameter,
    sigmoid,
    silu,
    total,
)
from crystal_gnn.trainer import BatchLabels, loss

from helpers import SMALL, perturbed_params, random_structure

DEFAULT_CENSUS = 379_593


def dense_layernorm(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def dense_phi(x, fc, gain, offset, eps=1e-5):
    d = fc.shape[1] // 2
    pre = x @ fc[:-1] + fc[-1]
    core = dense_layernorm(pre[..., :d], eps) * gain[:d] + offset[:d]
    gate = dense_layernorm(pre[..., d:], eps) * gain[d:] + offset[d:]
    return expit(gate) * core * expit(core)


def unfused_gated(x, fc, gain, offset, d):
    # two separate linears, two layer norms, separate sigmoid and silu
    core_w = Value(np.vstack([fc.data[:-1, :d], fc.data[-1:, :d]]))
    gate_w = Value(np.vstack([fc.data[:-1, d:], fc.data[-1:, d:]]))
    core = layernorm(affine(x, core_w), Value(gain.data[:d]), Value(offset.data[:d]))
    gate = layernorm(affine(x, gate_w), Value(gain.data[d:]), Value(offset.data[d:]))
    return mul(sigmoid(gate), silu(core)), (core_w, gate_w)


def params_of(cfg=SMALL, seed=0):
    return perturbed_params(cfg, seed)


# ---------------------------------------------------------------------------
# gated MLP


def test_gated_mlp_zero_weights():
    d = 4
    fc = Value(np.zeros((6, 2 * d)))
    out = gated_mlp(Value(np.ones((3, 5))), fc, Value(np.ones(2 * d)), Value(np.zeros(2 * d)))
    assert np.all(out.data == 0)


def test_gated_mlp_matches_unfused(rng):
    d = 5
    x = parameter(rng.normal(size=(7, 4)))
    fc = parameter(rng.normal(size=(5, 2 * d)))
    gain = parameter(rng.normal(size=2 * d))
    offset = parameter(rng.normal(size=2 * d))
    fused = gated_mlp(x, fc, gain, offset)
    x_ref = parameter(x.data.copy())
    ref, _ = unfused_gated(x_ref, fc, gain, offset, d)
    np.testing.assert_allclose(fused.data, ref.data, atol=1e-12)
    np.testing.assert_allclose(fused.data, dense_phi(x.data, fc.data, gain.data, offset.data),
                               atol=1e-12)
    w = Value(rng.normal(size=(7, d)))
    backward(total(fused * w))
    backward(total(ref * w))
    np.testing.assert_allclose(x.grad, x_ref.grad, atol=1e-10)


def test_gated_mlp_weight_grads_match_unfused(rng):
    d = 3
    x = Value(rng.normal(size=(6, 4)))
    fc = parameter(rng.normal(size=(5, 2 * d)))
    gain = parameter(rng.normal(size=2 * d))
    offset = parameter(rng.normal(size=2 * d))
    w = Value(rng.normal(size=(6, d)))
    backward(total(gated_mlp(x, fc, gain, offset) * w))
    core_w = parameter(np.vstack([fc.data[:-1, :d], fc.data[-1:, :d]]))
    gate_w = parameter(np.vstack([fc.data[:-1, d:], fc.data[-1:, d:]]))
    g_core, g_gate = parameter(gain.data[:d]), parameter(gain.data[d:])
    o_core, o_gate = parameter(offset.data[:d]), parameter(offset.data[d:])
    core = layernorm(affine(x, core_w), g_core, o_core)
    gate = layernorm(affine(x, gate_w), g_gate, o_gate)
    backward(total(mul(sigmoid(gate), silu(core)) * w))
    np.testing.assert_allclose(fc.grad, np.hstack([core_w.grad, gate_w.grad]), atol=1e-10)
    np.testing.assert_allclose(gain.grad, np.r_[g_core.grad, g_gate.grad], atol=1e-10)
    np.testing.assert_allclose(offset.grad, np.r_[o_core.grad, o_gate.grad], atol=1e-10)


def test_gated_mlp_shape_check():
    with pytest.raises(DimensionError):
        gated_mlp(Value(np.ones((2, 3))), Value(np.ones((4, 6))), Value(np.ones(4)),
                  Value(np.zeros(4)))


def test_split_linear_matches_concat(rng):
    a = parameter(rng.normal(size=(3, 2)))
    b = parameter(rng.normal(size=(5, 4)))
    idx = np.array([0, 2, 2, 1, 0])
    fc = parameter(rng.normal(size=(7, 3)))
    w = Value(rng.normal(size=(5, 3)))
    out = _split_linear([(a, idx), (b, None)], fc)
    a2, b2, fc2 = (parameter(v.data.copy()) for v in (a, b, fc))
    from crystal_gnn.tensor import gather
    ref = affine(concat([gather(a2, idx), b2]), fc2)
    np.testing.assert_allclose(out.data, ref.data, atol=1e-12)
    backward(total(out * w))
    backward(total(ref * w))
    for got, want in ((a, a2), (b, b2), (fc, fc2)):
        np.testing.assert_allclose(got.grad, want.grad, atol=1e-12)


# ---------------------------------------------------------------------------
# interaction block against dense loops


def block_inputs(rng, n_atoms, n_edges, n_angles, d=SMALL.d):
    v = Value(rng.normal(size=(n_atoms, d)))
    e = Value(rng.normal(size=(n_edges, d)))
    ea = Value(rng.normal(size=(n_edges, d)))
    eb = Value(rng.normal(size=(n_edges, d)))
    a = Value(rng.normal(size=(n_angles, d)))
    return v, e, ea, eb, a


def test_atom_conv_without_edges(rng):
    params = params_of()
    topo = Topology.from_arrays(3, [], [], [], [])
    v, e, ea, _, _ = block_inputs(rng, 3, 0, 0)
    assert np.array_equal(atom_conv(v, e, ea, topo, params, 0).data, v.data)


def test_atom_conv_dense_oracle(rng):
    params = params_of()
    src = np.array([0, 0, 1, 2, 2, 2])
    dst = np.array([1, 2, 0, 0, 1, 1])
    topo = Topology.from_arrays(3, src, dst, [], [])
    v, e, ea, _, _ = block_inputs(rng, 3, 6, 0)
    got = atom_conv(v, e, ea, topo, params, 0).data
    p = {k: x.data for k, x in params.items()}
    expected = v.data.copy()
    for k in range(6):
        x = np.concatenate([v.data[src[k]], v.data[dst[k]], e.data[k]])
        phi = dense_phi(x, p["block0.atom.fc"], p["block0.atom.ln_gain"], p["block0.atom.ln_offset"])
        expected[src[k]] += (ea.data[k] * phi) @ p["block0.atom.out"]
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_atom_conv_edge_order_invariance(rng):
    params = params_of()
    src = np.array([0, 0, 1, 2, 2])
    dst = np.array([1, 2, 0, 0, 1])
    v, e, ea, _, _ = block_inputs(rng, 3, 5, 0)
    base = atom_conv(v, e, ea, Topology.from_arrays(3, src, dst, [], []), params, 0).data
    perm = rng.permutation(5)
    shuffled = atom_conv(v, Value(e.data[perm]), Value(ea.data[perm]),
                         Topology.from_arrays(3, src[perm], dst[perm], [], []), params, 0).data
    np.testing.assert_allclose(base, shuffled, atol=1e-12)


ANGLE_SRC = np.array([0, 0, 0, 1, 1, 2])
ANGLE_DST = np.array([1, 2, 1, 0, 2, 0])
# ordered pairs of distinct edges around atoms 0 and 1
ANGLE_A = np.array([0, 1, 0, 2, 1, 2, 3, 4])
ANGLE_B = np.array([1, 0, 2, 0, 2, 1, 4, 3])


def dense_angle_phi(p, prefix, v, e, a, k):
    i = ANGLE_SRC[ANGLE_A[k]]
    x = np.concatenate([v[i], e[ANGLE_A[k]], e[ANGLE_B[k]], a[k]])
    return dense_phi(x, p[f"{prefix}.fc"], p[f"{prefix}.ln_gain"], p[f"{prefix}.ln_offset"])


def test_bond_conv_dense_oracle(rng):
    params = params_of()
    p = {k: x.data for k, x in params.items()}
    topo = Topology.from_arrays(3, ANGLE_SRC, ANGLE_DST, ANGLE_A, ANGLE_B)
    v, e, _, eb, a = block_inputs(rng, 3, 6, 8)
    got = bond_conv(v, e, a, eb, topo, params, 0).data
    expected = e.data.copy()
    for edge in range(6):
        acc = np.zeros(SMALL.d)
        for k in np.flatnonzero(ANGLE_A == edge):
            phi = dense_angle_phi(p, "block0.bond", v.data, e.data, a.data, k)
            acc += eb.data[edge] * eb.data[ANGLE_B[k]] * phi
        if np.any(ANGLE_A == edge):
            expected[edge] += acc @ p["block0.bond.out"]
    np.testing.assert_allclose(got, expected, atol=1e-12)
    # edge 5 takes part in no angle and passes through
    np.testing.assert_array_equal(got[5], e.data[5])


def test_angle_update_dense_oracle(rng):
    params = params_of()
    p = {k: x.data for k, x in params.items()}
    topo = Topology.from_arrays(3, ANGLE_SRC, ANGLE_DST, ANGLE_A, ANGLE_B)
    v, e, _, _, a = block_inputs(rng, 3, 6, 8)
    got = angle_update(v, e, a, topo, params, 0).data
    expected = a.data + np.array(
        [dense_angle_phi(p, "block0.angle", v.data, e.data, a.data, k) for k in range(8)]
    )
    np.testing.assert_allclose(got, expected, atol=1e-12)


def test_angle_update_zero_weights_is_identity(rng):
    params = params_of()
    params["block0.angle.fc"].data[:] = 0
    params["block0.angle.ln_offset"].data[:] = 0
    topo = Topology.from_arrays(3, ANGLE_SRC, ANGLE_DST, ANGLE_A, ANGLE_B)
    v, e, _, _, a = block_inputs(rng, 3, 6, 8)
    np.testing.assert_array_equal(angle_update(v, e, a, topo, params, 0).data, a.data)


def test_bond_conv_without_angles(rng):
    params = params_of()
    topo = Topology.from_arrays(2, [0, 1], [1, 0], [], [])
    v, e, _, eb, a = block_inputs(rng, 2, 2, 0)
    assert bond_conv(v, e, a, eb, topo, params, 0) is e


def test_angle_order_independence(rng):
    params = params_of()
    v, e, _, eb, a = block_inputs(rng, 3, 6, 8)
    perm = rng.permutation(8)
    base = Topology.from_arrays(3, ANGLE_SRC, ANGLE_DST, ANGLE_A, ANGLE_B)
    shuffled = Topology.from_arrays(3, ANGLE_SRC, ANGLE_DST, ANGLE_A[perm], ANGLE_B[perm])
    a_perm = Value(a.data[perm])
    np.testing.assert_allclose(bond_conv(v, e, a, eb, base, params, 0).data,
                               bond_conv(v, e, a_perm, eb, shuffled, params, 0).data, atol=1e-12)
    np.testing.assert_allclose(angle_update(v, e, a, base, params, 0).data[perm],
                               angle_update(v, e, a_perm, shuffled, params, 0).data, atol=1e-12)


def test_bond_and_angle_updates_commute(rng):
    params = params_of()
    topo = Topology.from_arrays(3, ANGLE_SRC, ANGLE_DST, ANGLE_A, ANGLE_B)
    v, e, _, eb, a = block_inputs(rng, 3, 6, 8)
    bond_first = bond_conv(v, e, a, eb, topo, params, 0).data
    angle_second = angle_update(v, e, a, topo, params, 0).data
    angle_first = angle_update(v, e, a, topo, params, 0).data
    bond_second = bond_conv(v, e, a, eb, topo, params, 0).data
    results = {}
    threads = [
        threading.Thread(target=lambda: results.__setitem__("b", bond_conv(v, e, a, eb, topo, params, 0).data)),
        threading.Thread(target=lambda: results.__setitem__("a", angle_update(v, e, a, topo, params, 0).data)),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    np.testing.assert_array_equal(bond_first, bond_second)
    np.testing.assert_array_equal(angle_first, angle_second)
    np.testing.assert_array_equal(results["b"], bond_first)
    np.testing.assert_array_equal(results["a"], angle_first)


# ---------------------------------------------------------------------------
# heads


def zero_last_layer(params, prefix, n_layers, bias):
    last = params[f"{prefix}.{n_layers - 1}"]
    last.data[:] = 0
    last.data[-1] = bias


def test_energy_head_constant_bias(rng):
    params = init_params(SMALL)
    zero_last_layer(params, "energy_head", 2, 0.7)
    v = Value(rng.normal(size=(5, SMALL.d)))
    seg = np.array([0, 0, 1, 1, 1])
    np.testing.assert_allclose(energy_head(v, seg, 2, params, SMALL).data, [1.4, 2.1], atol=1e-14)


def test_atom_reference_energies_add(rng):
    params = init_params(SMALL)
    zero_last_layer(params, "energy_head", 2, 0.0)
    params["atom_ref"].data[[0, 7]] = [-1.5, -3.0]
    v = Value(rng.normal(size=(3, SMALL.d)))
    out = energy_head(v, np.zeros(3, dtype=int), 1, params, SMALL, np.array([1, 8, 8]))
    assert out.data[0] == pytest.approx(-7.5)


def test_magmom_head_constant_bias(rng):
    params = init_params(SMALL)
    zero_last_layer(params, "magmom_head", 2, -0.3)
    out = magmom_head(Value(rng.normal(size=(4, SMALL.d))), params, SMALL).data
    np.testing.assert_allclose(out, -0.3)


def test_stress_head_zero_weights(rng):
    params = init_params(SMALL)
    zero_last_layer(params, "stress_head", 2, 0.0)
    out = stress_head(Value(rng.normal(size=(2, SMALL.d))), np.eye(3)[None] * 4,
                      np.zeros(2, dtype=int), np.array([2]), params, SMALL)
    assert np.all(out.data == 0)


def test_direction_outer_is_ones_for_cubic():
    np.testing.assert_allclose(lattice_direction_outer(np.eye(3)[None] * 5.3)[0], np.ones((3, 3)))


def test_stress_head_dense_oracle(rng):
    params = params_of()
    p = {k: x.data for k, x in params.items()}
    v = rng.normal(size=(2, SMALL.d))
    lattice = np.array([[4.0, 0.2, 0.0], [0.1, 3.5, 0.3], [0.0, -0.2, 5.0]])
    got = stress_head(Value(v), lattice[None], np.zeros(2, dtype=int), np.array([2]), params, SMALL)
    h = v @ p["stress_head.0"][:-1] + p["stress_head.0"][-1]
    h = h * expit(h)
    per_atom = h @ p["stress_head.1"][:-1] + p["stress_head.1"][-1]
    unit = lattice / np.linalg.norm(lattice, axis=1, keepdims=True)
    g = sum(np.outer(unit[i], unit[j]) for i in range(3) for j in range(3))
    np.testing.assert_allclose(got.data[0], per_atom.mean(axis=0).reshape(3, 3) * g, atol=1e-12)


def test_dimer_forces_antisymmetric():
    params = params_of()
    (pred,) = predict([dimer(2.3, element=8)], params, SMALL)
    np.testing.assert_array_equal(pred.forces[0], -pred.forces[1])


def test_isolated_atom_fallback():
    params = params_of()
    s = CrystalStructure(np.eye(3) * 20, [[0.5, 0.5, 0.5]], [8])
    (pred,) = predict([s], params, SMALL)
    p = {k: x.data for k, x in params.items()}
    v = p["embedding"][7]
    h = v @ p["energy_head.0"][:-1] + p["energy_head.0"][-1]
    h = h * expit(h)
    energy = h @ p["energy_head.1"][:-1] + p["energy_head.1"][-1] + p["atom_ref"][7]
    assert pred.energy == pytest.approx(float(energy[0]), abs=1e-12)
    assert np.all(pred.forces == 0)


# ---------------------------------------------------------------------------
# full forward


def test_rotation_and_translation(rng):
    params = params_of()
    s = random_structure(rng, n_atoms=4)
    rot = Rotation.random(random_state=3).as_matrix()
    rotated = CrystalStructure(s.lattice @ rot.T, s.frac_coords, s.atomic_numbers)
    shifted = CrystalStructure(s.lattice, s.frac_coords + [0.3, 0.6, 0.1], s.atomic_numbers)
    base, rot_pred, shift_pred = predict([s, rotated, shifted], params, SMALL)
    assert abs(base.energy - rot_pred.energy) < 1e-9
    assert np.abs(rot_pred.forces - base.forces @ rot.T).max() < 1e-9
    assert np.abs(rot_pred.magmoms - base.magmoms).max() < 1e-9
    assert abs(base.energy - shift_pred.energy) < 1e-9
    assert np.abs(shift_pred.forces - base.forces).max() < 1e-9


def test_permutation_equivariance(rng):
    params = params_of()
    s = random_structure(rng, n_atoms=5)
    perm = rng.permutation(5)
    p = CrystalStructure(s.lattice, s.frac_coords[perm], s.atomic_numbers[perm])
    base, permuted = predict([s, p], params, SMALL)
    assert abs(base.energy - permuted.energy) < 1e-9
    np.testing.assert_allclose(permuted.forces, base.forces[perm], atol=1e-9)
    np.testing.assert_allclose(permuted.magmoms, base.magmoms[perm], atol=1e-9)


def test_batch_matches_single(rng):
    params = params_of()
    structures = [random_structure(rng, n_atoms=n) for n in (3, 5)]
    single = [predict([s], params, SMALL)[0] for s in structures]
    batched = predict(structures, params, SMALL)
    for a, b in zip(single, batched):
        assert abs(a.energy - b.energy) < 1e-12
        np.testing.assert_allclose(a.forces, b.forces, atol=1e-12)
        np.testing.assert_allclose(a.stress, b.stress, atol=1e-12)
    (one,) = predict(structures[:1], params, SMALL)
    graph = build_graph(structures[0], SMALL.r_cut_atom, SMALL.r_cut_bond)
    out = forward(collate([graph]), params, SMALL)
    assert one.energy == float(out.energy.data[0])
    assert np.array_equal(one.forces, out.forces.data)


def test_duplicate_sample_energy(rng):
    params = params_of()
    s = random_structure(rng)
    a, b = predict([s, s], params, SMALL)
    (single,) = predict([s], params, SMALL)
    assert a.energy == pytest.approx(single.energy, abs=1e-12)
    assert b.energy == pytest.approx(single.energy, abs=1e-12)


def test_max_z_enforced():
    with pytest.raises(ValueError):
        predict([dimer(2.0, element=30)], init_params(SMALL), SMALL)


def test_no_dead_head_parameters(rng):
    params = params_of()
    structures = [random_structure(rng, n_atoms=4)]
    batch = collate([build_graph(s, SMALL.r_cut_atom, SMALL.r_cut_bond) for s in structures])
    total_loss, _, _ = loss(forward(batch, params, SMALL), BatchLabels.from_structures(structures),
                            {"energy": 2, "force": 1.5, "stress": 0.1, "magmom": 0.1})
    backward(total_loss, params.values())
    for name, p in params.items():
        if name == "atom_ref" or name == "embedding":
            continue
        assert np.abs(p.grad).max() > 0, name


# ---------------------------------------------------------------------------
# census and checkpoints


def test_default_census():
    count = param_census(init_params(ModelConfig()))
    assert count == DEFAULT_CENSUS
    assert abs(count - 429_046) / 429_046 <= 0.15


def test_embedding_census():
    assert param_shapes(ModelConfig(max_z=89))["embedding"] == (89, 64)
    assert 89 * 64 == 5696


def test_gated_weights_scale_with_width():
    small = param_shapes(ModelConfig(d=16))
    big = param_shapes(ModelConfig(d=32))
    for name, shape in small.items():
        if name.endswith(".fc"):
            assert np.prod(big[name]) >= 4 * (shape[0] - 1) * shape[1]


def test_checkpoint_round_trip(tmp_path):
    params = params_of()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, SMALL, meta={"epoch": 3})
    cfg, loaded = load_checkpoint(path)
    assert cfg == SMALL
    for name in params:
        assert np.array_equal(params[name].data, loaded[name].data)
    _, _, meta = read_checkpoint(path)
    assert meta == {"epoch": 3}


def test_checkpoint_layout(tmp_path):
    params = init_params(SMALL)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params, SMALL)
    blob = path.read_bytes()
    assert blob[:8] == b"CGNNCKPT"
    (length,) = struct.unpack("<Q", blob[8:16])
    manifest = json.loads(blob[16 : 16 + length])
    payload = blob[16 + length :]
    entry = next(t for t in manifest["tensors"] if t["name"] == "embedding")
    assert entry["dtype"] == "f64"
    raw = np.frombuffer(payload[entry["offset"] : entry["offset"] + entry["length"]], dtype="<f8")
    np.testing.assert_array_equal(raw.reshape(entry["shape"]), params["embedding"].data)
    assert sum(t["length"] for t in manifest["tensors"]) == len(payload)


def test_checkpoint_shape_mismatch(tmp_path):
    params = init_params(SMALL)
    params["embedding"] = parameter(np.zeros((3, 3)))
    path = tmp_path / "bad.ckpt"
    save_checkpoint(path, params, SMALL)
    with pytest.raises(CheckpointError, match="embedding"):
        load_checkpoint(path)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_config_rejects_unknown_keys():
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"d": 8, "width": 3})
    with pytest.raises(ValueError):
        ModelConfig(head_mode="other")
