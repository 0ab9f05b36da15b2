import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from pyagcn.agcn import (
    AgcnParams,
    ae_forward,
    attention_h,
    attention_s,
    check_distributions,
    forward,
    fuse_h,
    fuse_s,
    gcn_layer,
    kl_loss,
    predict_labels,
    predict_layer,
    prediction_input_dim,
    register_params,
    soft_assignment,
    target_distribution,
    total_loss,
)
from pyagcn.autodiff import Tape, finite_difference, relative_error
from pyagcn.errors import DataValidationError, DegenerateInputError
from pyagcn.graph import SparseAdjacency, normalize_adjacency
from pyagcn.models import ABLATIONS, AgcnConfig, apply_ablation

TOY_EDGES = [(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (5, 3), (2, 3)]


def toy_problem(ablation=None, **overrides):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((6, 3))
    a_norm = normalize_adjacency(SparseAdjacency.from_edges(6, TOY_EDGES))
    fields = dict(input_dim=3, hidden_dims=[4, 3], k=2, lambda1=1.0, lambda2=1.0)
    fields.update(overrides)
    config = AgcnConfig(**fields)
    if ablation is not None:
        config = apply_ablation(config, ablation)
    params = AgcnParams.initialize(config, seed=0)
    params.set_centroids(rng.standard_normal((2, 3)))
    return x, a_norm, config, params


def full_forward(x, a_norm, config, params, target=None):
    tape = Tape()
    return tape, forward(tape, params, config, x, a_norm, target)


@pytest.mark.parametrize("ablation", [None] + list(ABLATIONS))
def test_gradients_match_finite_differences(ablation):
    x, a_norm, config, params = toy_problem(ablation)
    _, first = full_forward(x, a_norm, config, params)
    target = first.p.copy()

    tape, out = full_forward(x, a_norm, config, params, target)
    grads = tape.backward(out.loss_total)
    assert set(grads) == set(params.names())

    def loss():
        return float(full_forward(x, a_norm, config, params, target)[1].loss_total.value[0, 0])

    for name in params:
        numeric = finite_difference(loss, params[name])
        err = relative_error(grads[name], numeric)
        assert err < 1e-4, f"{name}: relative error {err}"


def test_params_layout():
    _, _, config, params = toy_problem()
    assert params["enc_w1"].shape == (3, 4)
    assert params["enc_b1"].shape == (1, 4)
    assert params["enc_w2"].shape == (4, 3)
    assert params["dec_w1"].shape == (3, 4)
    assert params["dec_w2"].shape == (4, 3)
    assert params["gcn_w0"].shape == (3, 4)
    assert params["gcn_w1"].shape == (4, 3)
    assert params["attn_h_w1"].shape == (8, 2)
    assert params["attn_h_w2"].shape == (6, 2)
    assert params["attn_s_w"].shape == (4 + 3 + 3, 3)
    assert params["pred_w"].shape == (10, 2)
    assert params["centroids"].shape == (2, 3)
    assert prediction_input_dim(config) == 10


def test_initialize_is_deterministic():
    config = AgcnConfig(input_dim=5, hidden_dims=[8, 4], k=3)
    a, b = AgcnParams.initialize(config, 3), AgcnParams.initialize(config, 3)
    for name in a:
        assert np.array_equal(a[name], b[name])
    c = AgcnParams.initialize(config, 4)
    assert not np.array_equal(a["enc_w1"], c["enc_w1"])


def test_ae_forward_zero_everything():
    x, _, config, params = toy_problem()
    zeros = AgcnParams({name: np.zeros_like(v) for name, v in params.tensors.items()})
    tape = Tape()
    h, x_hat = ae_forward(tape.constant(np.zeros_like(x)), register_params(tape, zeros), config)
    assert all(not node.value.any() for node in h)
    assert not x_hat.value.any()


def test_ae_forward_identity_chain():
    config = AgcnConfig(input_dim=3, hidden_dims=[3, 3], k=2, ae_activation="linear")
    params = AgcnParams.initialize(config, 0)
    for name in params.ae_names():
        params.tensors[name] = np.eye(3) if "_w" in name else np.zeros((1, 3))
    x = np.random.default_rng(1).standard_normal((4, 3))
    tape = Tape()
    _, x_hat = ae_forward(tape.constant(x), register_params(tape, params), config)
    assert np.array_equal(x_hat.value, x)


def test_attention_h_zero_weights():
    tape = Tape()
    z = tape.constant(np.random.default_rng(0).standard_normal((5, 3)))
    h = tape.constant(np.random.default_rng(1).standard_normal((5, 3)))
    m = attention_h(z, h, tape.constant(np.zeros((6, 2))), 0.2)
    assert m.value == pytest.approx(np.full((5, 2), 1 / np.sqrt(2)))


def test_attention_h_saturates():
    tape = Tape()
    z = tape.constant(np.ones((2, 1)))
    h = tape.constant(np.zeros((2, 1)))
    m = attention_h(z, h, tape.constant([[50.0, -50.0], [0.0, 0.0]]), 0.2)
    assert m.value[:, 0] == pytest.approx([1.0, 1.0], abs=1e-6)
    assert m.value[:, 1] < 1e-6


def test_fuse_h():
    rng = np.random.default_rng(2)
    z_val, h_val, m_val = rng.random((3, 2)), rng.random((3, 2)), rng.random((3, 2))
    tape = Tape()
    z, h = tape.constant(z_val), tape.constant(h_val)
    ones = np.tile([1.0, 0.0], (3, 1))
    assert np.array_equal(fuse_h(z, h, tape.constant(ones)).value, z_val)
    assert np.array_equal(fuse_h(z, h, tape.constant(ones[:, ::-1].copy())).value, h_val)
    fused = fuse_h(z, h, tape.constant(m_val)).value
    expected = m_val[:, [0]] * z_val + m_val[:, [1]] * h_val
    assert fused == pytest.approx(expected)


def test_gcn_layer():
    tape = Tape()
    x = np.abs(np.random.default_rng(3).standard_normal((3, 3)))
    out = gcn_layer(SparseAdjacency.identity(3), tape.constant(x), tape.constant(np.eye(3)), 0.2)
    assert np.array_equal(out.value, x)

    a_norm = normalize_adjacency(SparseAdjacency.from_edges(2, [(0, 1)]))
    rows = np.array([[1.0, -4.0], [3.0, 2.0]])
    out = gcn_layer(a_norm, tape.constant(rows), tape.constant(np.eye(2)), 0.2)
    mean = rows.mean(axis=0)
    expected = np.where(mean > 0, mean, 0.2 * mean)
    assert out.value == pytest.approx(np.vstack([expected, expected]))


def test_attention_s_zero_weights():
    tape = Tape()
    rng = np.random.default_rng(4)
    parts = [tape.constant(rng.standard_normal((3, 2))) for _ in range(5)]
    u = attention_s(parts, tape.constant(np.zeros((10, 5))), 0.2)
    assert u.value == pytest.approx(np.full((3, 5), 1 / np.sqrt(5)))


def test_fuse_s():
    tape = Tape()
    rng = np.random.default_rng(5)
    parts = [tape.constant(rng.standard_normal((3, d))) for d in (2, 3, 1)]
    plain = fuse_s(parts, tape.constant(np.ones((3, 3)))).value
    assert np.array_equal(plain, np.hstack([p.value for p in parts]))
    u = np.ones((3, 3))
    u[:, 1] = 0.0
    assert not fuse_s(parts, tape.constant(u)).value[:, 2:5].any()


def test_predict_layer():
    tape = Tape()
    a_norm = SparseAdjacency.identity(4)
    z = tape.constant(np.random.default_rng(6).standard_normal((4, 3)))
    uniform = predict_layer(a_norm, z, tape.constant(np.zeros((3, 5))))
    assert uniform.value == pytest.approx(np.full((4, 5), 0.2))

    favored = np.zeros((2, 3))
    favored[:, 2] = 50.0
    out = predict_layer(a_norm, tape.constant(np.ones((4, 2))), tape.constant(favored))
    assert np.all(out.value[:, 2] > 0.99)


def test_soft_assignment():
    tape = Tape()
    h = tape.constant([[0.0, 0.0], [1.0, 0.0]])
    q = soft_assignment(h, tape.constant([[5.0, 5.0]]), 1.0)
    assert np.array_equal(q.value, np.ones((2, 1)))

    q = soft_assignment(tape.constant([[0.0, 0.0]]), tape.constant([[-1.0, 0.0], [1.0, 0.0]]), 1.0)
    assert q.value[0] == pytest.approx([0.5, 0.5])

    q = soft_assignment(tape.constant([[0.0, 0.0]]), tape.constant([[0.0, 0.0], [1.0, 0.0]]), 1.0)
    assert q.value[0] == pytest.approx([2 / 3, 1 / 3])


def test_target_distribution():
    one_hot = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    assert np.array_equal(target_distribution(one_hot), one_hot)
    assert target_distribution(np.full((4, 3), 1 / 3)) == pytest.approx(np.full((4, 3), 1 / 3))

    q = np.array([[0.8, 0.2], [0.4, 0.6]])
    p = target_distribution(q)
    weight = q * q / q.sum(axis=0)
    assert p == pytest.approx(weight / weight.sum(axis=1, keepdims=True))
    expected = [[0.9142857142857143, 0.0857142857142857], [0.2285714285714286, 0.7714285714285714]]
    assert p == pytest.approx(np.array(expected))


@settings(max_examples=60, deadline=None)
@given(
    k=st.integers(min_value=2, max_value=6),
    repeats=st.integers(min_value=1, max_value=4),
    seed=st.integers(min_value=0, max_value=2**16),
)
def test_target_distribution_sharpens_balanced_rows(k, repeats, seed):
    row = np.random.default_rng(seed).random(k) + 1e-3
    row /= row.sum()
    # rotations give every column the same total
    q = np.array([np.roll(row, i) for i in range(k * repeats)])
    p = target_distribution(q)
    assert np.all(p.max(axis=1) >= q.max(axis=1) - 1e-12)
    assert np.array_equal(p.argmax(axis=1), q.argmax(axis=1))


def test_target_distribution_empty_column():
    with pytest.raises(DegenerateInputError, match=r"\[1\]"):
        target_distribution(np.array([[1.0, 0.0], [1.0, 0.0]]))


def test_kl_loss_plug_in():
    tape = Tape()
    half = tape.constant([[0.5, 0.5]])
    p = np.array([[1.0, 0.0]])
    assert kl_loss(p, half, half, 1.0, 1.0).value[0, 0] == pytest.approx(2 * np.log(2))
    assert kl_loss(p, half, half, 0.0, 0.0).value[0, 0] == 0.0
    same = np.array([[0.3, 0.7]])
    node = tape.constant(same)
    assert kl_loss(same, node, node, 1.0, 1.0).value[0, 0] == pytest.approx(0.0)


def test_total_loss():
    tape = Tape()
    assert total_loss(tape.constant(0.0), tape.constant(0.0)).value[0, 0] == 0.0
    assert total_loss(tape.constant(1.5), tape.constant(2.5)).value[0, 0] == 4.0


def test_predict_labels():
    assert predict_labels(np.array([[0.1, 0.7, 0.2]])).tolist() == [1]
    assert predict_labels(np.full((1, 4), 0.25)).tolist() == [0]
    z = np.random.default_rng(7).random((100, 5))
    expected = [max(range(5), key=lambda j: (row[j], -j)) for row in z]
    assert predict_labels(z).tolist() == expected


def test_forward_invariants():
    x, a_norm, config, params = toy_problem()
    _, out = full_forward(x, a_norm, config, params)
    check_distributions(out, config)
    assert len(out.z) == 2
    assert len(out.m) == 1
    assert out.z_fused.shape == (6, 10)
    assert out.z_pred.shape == (6, 2)
    assert out.loss_total.value[0, 0] == pytest.approx(
        out.loss_rec.value[0, 0] + out.loss_kl.value[0, 0]
    )
    rec = ((out.x_hat.value - x) ** 2).sum()
    assert out.loss_rec.value[0, 0] == pytest.approx(rec)


def test_zero_lambdas_zero_kl():
    x, a_norm, config, params = toy_problem(lambda1=0.0, lambda2=0.0)
    _, out = full_forward(x, a_norm, config, params)
    assert out.loss_kl.value[0, 0] == 0.0


def test_baseline_uses_fixed_weights():
    x, a_norm, config, params = toy_problem("baseline")
    tape, out = full_forward(x, a_norm, config, params)
    assert out.u is None
    for m in out.m:
        assert np.array_equal(m.value, np.tile([1.0, 0.0], (6, 1)))
    assert out.z_fused.shape == (6, 3)
    grads = tape.backward(out.loss_total)
    for name in ("attn_h_w1", "attn_h_w2", "attn_s_w"):
        assert not grads[name].any()


def test_fixed_fusion_weights_are_configurable():
    x, a_norm, config, params = toy_problem("baseline", fixed_fusion_weights=(0.5, 0.5))
    _, out = full_forward(x, a_norm, config, params)
    assert np.array_equal(out.m[0].value, np.full((6, 2), 0.5))


def test_heterogeneity_only_fuses_last_layer():
    x, a_norm, config, params = toy_problem("agcn-h")
    tape, out = full_forward(x, a_norm, config, params)
    assert len(out.m) == 2
    assert prediction_input_dim(config) == 3
    grads = tape.backward(out.loss_total)
    assert grads["attn_h_w2"].any()
    assert not grads["attn_s_w"].any()


def test_unit_scale_weights():
    x, a_norm, config, params = toy_problem("agcn-h+s[s]")
    tape, out = full_forward(x, a_norm, config, params)
    assert np.array_equal(out.u.value, np.ones((6, 3)))
    grads = tape.backward(out.loss_total)
    assert not grads["attn_s_w"].any()
    assert not grads["attn_h_w2"].any()


def test_single_scale():
    x, a_norm, config, params = toy_problem(single_scale=3)
    assert params["pred_w"].shape == (3, 2)
    _, out = full_forward(x, a_norm, config, params)
    assert out.z_fused is out.h[-1]
    x, a_norm, config, params = toy_problem(single_scale=1)
    _, out = full_forward(x, a_norm, config, params)
    assert out.z_fused is out.z[0]


def test_forward_errors():
    x, a_norm, config, params = toy_problem()
    with pytest.raises(DataValidationError):
        full_forward(x[:5], a_norm, config, params)
    bare = AgcnParams({k: v for k, v in params.tensors.items() if k != "centroids"})
    with pytest.raises(DataValidationError, match="centroids"):
        full_forward(x, a_norm, config, bare)


def test_config_validation():
    with pytest.raises(ValidationError):
        AgcnConfig(k=2, hidden_dims=[5])
    with pytest.raises(ValidationError):
        AgcnConfig(k=2, use_agcns_concat=False, use_agcns_attention=True)
    with pytest.raises(ValidationError):
        AgcnConfig(k=2, hidden_dims=[4, 3], single_scale=4)
    with pytest.raises(ValidationError):
        AgcnConfig(k=2, leaky_slope=1.0)
    config = AgcnConfig(k=2)
    assert config.hidden_dims == [500, 500, 2000, 10]
    assert config.with_input_dim(7).layer_dims == [7, 500, 500, 2000, 10]


def test_params_save_load(tmp_path):
    _, _, _, params = toy_problem()
    path = tmp_path / "params.npz"
    params.save(path)
    loaded = AgcnParams.load(path)
    assert loaded.names() == params.names()
    for name in params:
        assert np.array_equal(loaded[name], params[name])
