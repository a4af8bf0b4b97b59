import numpy as np
from hypothesis import HealthCheck, given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from cdcgen.audit import PRIMITIVES, run_case
from cdcgen.data import Dataset, SOURCE, balanced_resample, encode_idx, parse_idx, resize_bilinear
from cdcgen.diffmath import Tensor, backward, no_grad, ops
from cdcgen.eval import cycle_audit, pca_project
from cdcgen.flow import VectorFlow
from cdcgen.trainer.checkpoint import Checkpoint, decode_checkpoint, encode_checkpoint
from cdcgen.trainer.loops import AlignConfig
from conftest import randomize

seeds = st.integers(0, 2**32 - 1)
finite = dict(allow_nan=False, allow_infinity=False)
SLOW = settings(max_examples=30, deadline=None, suppress_health_check=[HealthCheck.too_slow])


@settings(max_examples=200, deadline=None)
@given(st.sampled_from(sorted(PRIMITIVES)), seeds)
def test_primitive_gradients_match_central_differences(name, seed):
    assert run_case(name, "primitive", [seed]).passed


def _points(dim, n=16, bound=10.0):
    return hnp.arrays(np.float64, (n, dim), elements=st.floats(-bound, bound, **finite))


@SLOW
@given(seeds, st.integers(2, 6).flatmap(lambda d: _points(d)))
def test_flow_bijective_on_bounded_inputs(seed, x):
    rng = np.random.default_rng(seed)
    flow = randomize(VectorFlow(x.shape[1], 4, 16, rng), rng)
    with no_grad():
        back = flow.inverse(flow.forward(Tensor(x)).z).data
    assert np.abs(back - x).max() < 1e-9


@SLOW
@given(seeds, _points(2, bound=5.0))
def test_cycle_consistent_for_random_parameters(seed, x):
    rng = np.random.default_rng(seed)
    fs = randomize(VectorFlow(2, 8, 64, rng), rng)
    ft = randomize(VectorFlow(2, 8, 64, rng), rng)
    out = cycle_audit(fs, ft, x, x)
    assert out["cycle_max_s"] < 1e-8 and out["cycle_max_t"] < 1e-8


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(-3, 3, **finite)), st.floats(0.1, 5.0))
def test_gradients_accumulate_across_backward_calls(x, c):
    w = Tensor(x, requires_grad=True)
    backward(ops.sum(ops.square(w)))
    backward(ops.sum(ops.mul(w, c)))
    assert np.allclose(w.grad, 2 * x + c, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-2, 2, **finite), min_size=4, max_size=4))
def test_negative_weights_rejected(ws):
    keys = ("lambda_s", "lambda_t", "gamma_s", "gamma_t")
    kwargs = dict(zip(keys, ws))
    if min(ws) < 0:
        try:
            AlignConfig(**kwargs)
        except ValueError:
            return
        raise AssertionError("negative weight accepted")
    assert AlignConfig(**kwargs).lambda_s == ws[0]


tensor_names = st.text("abcdefgh._", min_size=1, max_size=8)
arrays = st.integers(0, 3).flatmap(
    lambda nd: hnp.arrays(np.float64, hnp.array_shapes(min_dims=nd, max_dims=nd, min_side=0, max_side=4),
                          elements=st.floats(width=64)))


@settings(max_examples=100, deadline=None)
@given(st.dictionaries(tensor_names, arrays, max_size=5), st.sampled_from(["align", "cond"]),
       st.integers(0, 2**63), st.dictionaries(st.text(max_size=5), st.integers() | st.text(max_size=5), max_size=3))
def test_checkpoint_roundtrip(params, phase, step, config):
    ckpt = Checkpoint(phase, step, params, config, {}, {})
    raw = encode_checkpoint(ckpt)
    back = decode_checkpoint(raw)
    assert back.phase == phase and back.step == step and back.config == config
    assert sorted(back.params) == sorted(params)
    for k, v in params.items():
        assert back.params[k].shape == v.shape
        assert back.params[k].tobytes() == v.tobytes()
    assert encode_checkpoint(back) == raw


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.uint8, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6)))
def test_idx_roundtrip(arr):
    raw = encode_idx(arr)
    back = parse_idx(raw)
    assert back.shape == arr.shape and np.array_equal(back, arr) and encode_idx(back) == raw


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 5), st.integers(1, 4), st.integers(1, 3), seeds)
def test_balanced_resample_is_exactly_balanced(k, per_train, per_test, seed):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(k), per_train + rng.integers(0, 3))
    rng.shuffle(labels)
    ds = Dataset(np.arange(len(labels), dtype=float)[:, None], labels, SOURCE, "x", k)
    tr, te = balanced_resample(ds, ds, per_train, min(per_test, per_train), seed=seed)
    assert np.all(np.bincount(tr.labels, minlength=k) == per_train)
    assert np.all(np.bincount(te.labels, minlength=k) == min(per_test, per_train))
    assert len(np.unique(tr.samples)) == len(tr)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, min_side=1, max_side=7),
                  elements=st.floats(-100, 100, **finite)), st.integers(1, 12), st.integers(1, 12))
def test_resize_stays_within_input_range(img, h, w):
    out = resize_bilinear(img, h, w)
    assert out.shape == (h, w)
    assert out.min() >= img.min() - 1e-9 and out.max() <= img.max() + 1e-9


@settings(max_examples=50, deadline=None, suppress_health_check=[HealthCheck.filter_too_much])
@given(hnp.arrays(np.float64, st.tuples(st.integers(3, 20), st.integers(2, 5)), elements=st.floats(-10, 10, **finite)),
       hnp.arrays(np.float64, 5, elements=st.floats(-50, 50, **finite)))
def test_pca_translation_invariant_and_contractive(x, shift):
    p = pca_project(x)
    assert np.allclose(pca_project(x + shift[: x.shape[1]]), p, atol=1e-8)
    d = lambda a: np.linalg.norm(a[:, None] - a[None], axis=-1)
    assert np.all(d(p) <= d(x) + 1e-8)
