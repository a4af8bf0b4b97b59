import math

import numpy as np
import pytest

from cdcgen.diffmath import NonFiniteError, ShapeError, Tensor, grad_check, check_parameters, no_grad, ops
from cdcgen.flow import (
    LOGIT_ALPHA,
    FlowError,
    ImageFlow,
    VectorCoupling,
    VectorFlow,
    build_flow,
    dequantize,
    log_prob,
    quantize,
    translate,
)
from conftest import perturb

LOG_2PI = math.log(2.0 * math.pi)


def _forward(flow, x):
    with no_grad():
        z, ld = flow.forward(Tensor(x))
    return z.data, ld.data


def _inverse(flow, z):
    with no_grad():
        return flow.inverse(Tensor(z)).data


def _fd_logdet(flow, x, h=1e-6):
    d = x.shape[0]
    jac = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        up, _ = _forward(flow, (x + e)[None])
        down, _ = _forward(flow, (x - e)[None])
        jac[:, j] = (up[0] - down[0]) / (2 * h)
    return np.linalg.slogdet(jac)[1]


def test_fresh_vector_flow_is_identity():
    flow = VectorFlow(2, 8, 64, np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((10, 2))
    z, ld = _forward(flow, x)
    assert np.array_equal(z, x)
    assert np.all(ld == 0.0)
    assert np.array_equal(_inverse(flow, x), x)


def test_fresh_image_flow_has_zero_logdet_and_inverts():
    flow = ImageFlow((1, 8, 8), n_scales=2, n_channels=4, n_blocks=1, rng=np.random.default_rng(0))
    x = np.random.default_rng(1).standard_normal((3, 1, 8, 8))
    z, ld = _forward(flow, x)
    assert np.all(ld == 0.0)
    assert np.array_equal(np.sort(z, axis=1), np.sort(x.reshape(3, -1), axis=1))
    assert np.abs(_inverse(flow, z) - x).max() == 0.0


def _constant_coupling(s0, t0):
    layer = VectorCoupling(4, np.array([1.0, 1.0, 0.0, 0.0]), 8, np.random.default_rng(0))
    last = layer.net.layers[-1]
    # zero weights: net output is the bias; tanh clamp inverted so the log-scale is exactly s0
    last.weight.data[...] = 0.0
    last.bias.data[:4] = 2.0 * np.arctanh(s0 / 2.0)
    last.bias.data[4:] = t0
    return layer


def test_constant_affine_coupling_closed_form():
    s0, t0 = 0.4, -1.25
    layer = _constant_coupling(s0, t0)
    x = np.random.default_rng(2).standard_normal((5, 4))
    with no_grad():
        z, ld = layer.forward(Tensor(x))
        back, _ = layer.inverse(z)
    assert np.allclose(z.data[:, :2], x[:, :2], atol=0)
    assert np.allclose(z.data[:, 2:], x[:, 2:] * math.exp(s0) + t0, atol=1e-12)
    assert np.allclose(ld.data, 2 * s0, atol=1e-12)
    assert np.allclose(back.data[:, 2:], (z.data[:, 2:] - t0) * math.exp(-s0), atol=1e-12)
    assert np.abs(back.data - x).max() < 1e-12


def test_mask_must_split():
    with pytest.raises(ValueError):
        VectorCoupling(2, np.array([1.0, 1.0]), 8, np.random.default_rng(0))


@pytest.mark.parametrize("dim", [2, 3, 4, 8])
def test_logdet_matches_explicit_jacobian(dim):
    rng = np.random.default_rng(dim)
    flow = perturb(VectorFlow(dim, 6, 16, rng), rng)
    for x in rng.standard_normal((3, dim)):
        _, ld = _forward(flow, x[None])
        ref = _fd_logdet(flow, x)
        assert abs(ld[0] - ref) <= 1e-4 * max(1.0, abs(ref))


def test_image_logdet_matches_explicit_jacobian():
    rng = np.random.default_rng(7)
    flow = perturb(ImageFlow((1, 2, 2), 1, 4, 1, rng), rng, 0.2)
    x = rng.standard_normal(4)
    _, ld = _forward(flow, x.reshape(1, 1, 2, 2))
    h = 1e-6
    jac = np.empty((4, 4))
    for j in range(4):
        e = np.zeros(4)
        e[j] = h
        up, _ = _forward(flow, (x + e).reshape(1, 1, 2, 2))
        down, _ = _forward(flow, (x - e).reshape(1, 1, 2, 2))
        jac[:, j] = (up[0] - down[0]) / (2 * h)
    assert abs(ld[0] - np.linalg.slogdet(jac)[1]) < 1e-4 * max(1.0, abs(ld[0]))


def test_perturbed_vector_roundtrip_wide_inputs():
    rng = np.random.default_rng(3)
    flow = perturb(VectorFlow(2, 8, 32, rng), rng)
    x = rng.uniform(-10, 10, (1000, 2))
    z, _ = _forward(flow, x)
    assert np.abs(_inverse(flow, z) - x).max() < 1e-9
    zz = rng.standard_normal((1000, 2))
    assert np.abs(_forward(flow, _inverse(flow, zz))[0] - zz).max() < 1e-9


def test_trained_flow_roundtrip(trained_flow_2d):
    z = np.random.default_rng(4).standard_normal((1000, 2))
    x = _inverse(trained_flow_2d, z)
    assert np.abs(_forward(trained_flow_2d, x)[0] - z).max() < 1e-9


def test_image_flow_roundtrip_perturbed():
    rng = np.random.default_rng(5)
    flow = perturb(ImageFlow((1, 8, 8), 2, 4, 1, rng), rng, 0.1)
    x = rng.uniform(-3, 3, (20, 1, 8, 8))
    z, _ = _forward(flow, x)
    assert np.abs(_inverse(flow, z) - x).max() < 1e-9


def test_log_prob_identity_flow():
    flow = VectorFlow(2, 4, 8, np.random.default_rng(0))
    with no_grad():
        lp = log_prob(flow, Tensor([[0.0, 0.0], [1.0, 0.0]])).data
    assert np.allclose(lp, [-LOG_2PI, -LOG_2PI - 0.5], atol=1e-12)
    assert round(lp[0], 4) == -1.8379


def test_trained_density_integrates_to_one(trained_flow_2d):
    g = np.linspace(-6, 6, 241)
    xx, yy = np.meshgrid(g, g)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)
    with no_grad():
        dens = np.exp(log_prob(trained_flow_2d, Tensor(pts)).data)
    mass = dens.sum() * (g[1] - g[0]) ** 2
    assert 0.98 <= mass <= 1.02


def test_flow_nll_gradient_check():
    rng = np.random.default_rng(6)
    flow = perturb(VectorFlow(2, 2, 8, rng), rng)
    x = Tensor(rng.standard_normal((6, 2)))
    err = check_parameters(lambda: -ops.mean(log_prob(flow, x)), flow.parameters(), max_coords=2, rng=rng)
    assert err < 1e-5


def test_flow_input_gradient_check():
    rng = np.random.default_rng(8)
    flow = perturb(VectorFlow(3, 2, 8, rng), rng)
    assert grad_check(lambda x: ops.mean(log_prob(flow, x)), Tensor(rng.standard_normal((4, 3)))) < 1e-5


def test_non_finite_input_raises():
    flow = VectorFlow(2, 2, 8, np.random.default_rng(0))
    with pytest.raises(NonFiniteError):
        flow.forward(Tensor([[np.inf, 0.0]]))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_overflow_reports_layer_index():
    flow = VectorFlow(2, 3, 8, np.random.default_rng(0))
    flow.couplings[1].net.layers[-1].bias.data[2:] = np.inf  # corrupt the second layer only
    with pytest.raises(FlowError) as info:
        flow.forward(Tensor([[1.0, 1.0]]))
    assert info.value.layer == 1
    with pytest.raises(FlowError) as info:
        flow.inverse(Tensor([[1.0, 1.0]]))
    assert info.value.layer == 1


def test_shape_mismatch():
    flow = VectorFlow(2, 2, 8, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        flow.forward(Tensor(np.zeros((3, 4))))
    with pytest.raises(ShapeError):
        translate(flow, VectorFlow(4, 2, 8, np.random.default_rng(0)), Tensor(np.zeros((1, 2))))


def test_parameter_enumeration_deterministic():
    a = [n for n, _ in ImageFlow((1, 8, 8), 2, 4, 1, np.random.default_rng(0)).named_parameters()]
    b = [n for n, _ in ImageFlow((1, 8, 8), 2, 4, 1, np.random.default_rng(9)).named_parameters()]
    assert a == b and len(a) == len(set(a))


def test_latent_dim_equals_input_dim():
    flow = ImageFlow((1, 16, 16), 3, 4, 1, np.random.default_rng(0))
    assert flow.latent_dim == 256
    z, _ = _forward(flow, np.zeros((1, 1, 16, 16)))
    assert z.shape == (1, 256)


def test_build_flow_from_config_roundtrips():
    flow = ImageFlow((1, 8, 8), 2, 4, 1, np.random.default_rng(0))
    assert build_flow(flow.config(), np.random.default_rng(0)).config() == flow.config()


def test_dequantize_closed_form():
    deq = dequantize(np.zeros((1, 1, 1, 1)), noise=np.full((1, 1, 1, 1), 0.5))
    y = 0.05 + 0.9 * (0.5 / 256)
    assert LOGIT_ALPHA == 0.05
    assert abs(deq.values.item() - math.log(y / (1 - y))) < 1e-15


def test_dequantize_alpha_zero_rejected():
    with pytest.raises(ValueError):
        dequantize(np.zeros((1, 1, 2, 2)), alpha=0.0, noise=np.zeros((1, 1, 2, 2)))


def test_dequantize_validates_pixels():
    with pytest.raises(ValueError):
        dequantize(np.full((1, 1, 1, 1), 256.0))
    with pytest.raises(ValueError):
        dequantize(np.full((1, 1, 1, 1), 1.5))


def test_dequantize_seeded():
    img = np.random.default_rng(0).integers(0, 256, (2, 1, 4, 4))
    a, b = dequantize(img, seed=3), dequantize(img, seed=3)
    assert np.array_equal(a.values, b.values) and np.array_equal(a.log_det, b.log_det)
    assert not np.array_equal(a.values, dequantize(img, seed=4).values)


def test_dequantize_logdet_matches_derivative():
    img = np.array([[[[0.0, 17.0], [128.0, 255.0]]]])
    u = np.full(img.shape, 0.3)
    h = 1e-6
    up = dequantize(img, noise=u + h).values
    down = dequantize(img, noise=u - h).values
    assert abs(dequantize(img, noise=u).log_det[0] - np.log((up - down) / (2 * h)).sum()) < 1e-6


def test_quantize_inverts_dequantize():
    img = np.random.default_rng(1).integers(0, 256, (3, 1, 4, 4))
    assert np.array_equal(quantize(dequantize(img, seed=0).values), img)


def test_translate_same_flow_is_identity():
    rng = np.random.default_rng(10)
    flow = perturb(VectorFlow(2, 4, 16, rng), rng)
    x = rng.standard_normal((50, 2))
    with no_grad():
        out = translate(flow, flow, Tensor(x)).data
    assert np.abs(out - x).max() < 1e-9


def test_translate_identity_flows():
    f1 = VectorFlow(2, 4, 8, np.random.default_rng(0))
    f2 = VectorFlow(2, 4, 8, np.random.default_rng(1))
    x = np.random.default_rng(2).standard_normal((5, 2))
    with no_grad():
        assert np.array_equal(translate(f1, f2, Tensor(x)).data, x)


def test_cycle_through_two_random_flows():
    rng = np.random.default_rng(11)
    fs = perturb(VectorFlow(2, 8, 32, rng), rng)
    ft = perturb(VectorFlow(2, 8, 32, rng), rng)
    x = rng.uniform(-5, 5, (500, 2))
    with no_grad():
        back = translate(ft, fs, translate(fs, ft, Tensor(x))).data
    assert np.abs(back - x).max() < 1e-8
