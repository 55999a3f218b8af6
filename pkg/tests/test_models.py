import numpy as np
import pytest

from tcri import tensor as T
from tcri.models import (
    ArchSpec, forward_dg, forward_ds, init_model, load_checkpoint, save_checkpoint, theta_e_param_count,
)
from tcri.tensor import ShapeError, finite_difference_check


def mlp_spec(**kw):
    base = dict(input_dim=6, m=3, o=2, num_classes=2, num_domains=3, backbone="mlp", hidden=(5, 4))
    base.update(kw)
    return ArchSpec(**base)


def test_linear_probe_shape():
    p = init_model(ArchSpec(input_dim=2, m=1, o=1, num_classes=1, num_domains=2, rep_bias=False), seed=0)
    assert p["phi_dg.W"].shape == (2, 1)
    assert "phi_dg.b" not in p.tensors


def test_init_is_deterministic_and_glorot():
    a, b = init_model(mlp_spec(), 4), init_model(mlp_spec(), 4)
    for k in a.names():
        assert np.array_equal(a[k].data, b[k].data)
    c = init_model(mlp_spec(), 5)
    assert not np.array_equal(a["trunk.0.W"].data, c["trunk.0.W"].data)
    w = a["trunk.0.W"].data
    assert np.abs(w).max() <= np.sqrt(6 / (6 + 5))


def test_biases_zero_at_init():
    p = init_model(mlp_spec(), 0)
    for k in p.names():
        if k.endswith(".b"):
            assert np.all(p[k].data == 0)


@pytest.mark.parametrize("field", ["m", "o", "input_dim", "num_classes", "num_domains"])
def test_zero_dims_rejected(field):
    kw = dict(input_dim=2, m=1, o=1, num_classes=2, num_domains=2)
    kw[field] = 0
    with pytest.raises(ValueError):
        ArchSpec(**kw)


def test_identity_phi_zero_head_gives_zero_logits():
    spec = ArchSpec(input_dim=3, m=3, o=1, num_classes=2, num_domains=1)
    p = init_model(spec, 0)
    p["phi_dg.W"].data = np.eye(3)
    p["theta_c.W"].data = np.zeros((3, 2))
    X = np.random.default_rng(0).standard_normal((5, 3))
    z, logits = forward_dg(p, X)
    np.testing.assert_array_equal(z.data, X)
    np.testing.assert_array_equal(logits.data, 0)


def test_forward_dg_gradient():
    p = init_model(mlp_spec(), 1)
    g = np.random.default_rng(1)
    X = g.standard_normal((7, 6))
    # nonzero biases keep pre-activations off the relu kink
    for k in p.names():
        if k.endswith(".b"):
            p[k].data = g.uniform(0.1, 0.3, p[k].shape)
    params = [p[k] for k in p.names() if not k.startswith(("theta_e", "phi_spu"))]
    assert finite_difference_check(lambda: T.mean(forward_dg(p, X)[1]), params, 1e-6) < 1e-4


def test_forward_permutes_with_batch():
    p = init_model(mlp_spec(), 2)
    X = np.random.default_rng(2).standard_normal((9, 6))
    perm = np.random.default_rng(3).permutation(9)
    np.testing.assert_allclose(forward_dg(p, X[perm])[1].data, forward_dg(p, X)[1].data[perm], rtol=0, atol=1e-15)
    np.testing.assert_allclose(forward_ds(p, X[perm], 1).data, forward_ds(p, X, 1).data[perm], rtol=0, atol=1e-15)


def test_width_mismatch_and_domain_range():
    p = init_model(mlp_spec(), 0)
    with pytest.raises(ShapeError):
        forward_dg(p, np.zeros((2, 5)))
    with pytest.raises(IndexError):
        forward_ds(p, np.zeros((2, 6)), 3)


def test_ds_zero_spu_and_zero_head():
    p = init_model(mlp_spec(), 0)
    p["phi_spu.W"].data[:] = 0
    p["theta_e.0.W"].data[:] = 0
    np.testing.assert_array_equal(forward_ds(p, np.random.default_rng(0).standard_normal((4, 6)), 0).data, 0)


def test_distinct_domains_distinct_logits():
    p = init_model(mlp_spec(), 0)
    X = np.random.default_rng(4).standard_normal((4, 6))
    outs = [forward_ds(p, X, e).data for e in range(3)]
    assert not np.allclose(outs[0], outs[1]) and not np.allclose(outs[1], outs[2])


def test_theta_e_parameter_count():
    spec = mlp_spec()
    p = init_model(spec, 0)
    for e in range(spec.num_domains):
        assert theta_e_param_count(p, e) == (spec.m + spec.o + 1) * spec.num_classes
    assert sum(1 for k in p.names() if k.startswith("theta_c")) == 2


def test_checkpoint_roundtrip(tmp_path):
    p = init_model(mlp_spec(), 3)
    save_checkpoint(p, tmp_path / "ck", step=17, cfg_hash="abc")
    q, manifest = load_checkpoint(tmp_path / "ck")
    assert manifest["step"] == 17 and manifest["config_hash"] == "abc"
    assert q.spec == p.spec
    for k in p.names():
        assert np.array_equal(p[k].data, q[k].data)
