import math

import numpy as np
import pytest

from cdcgen.condsynth import VectorEncoder, synthesize
from cdcgen.eval import (
    EvalReport,
    ProbeInvalid,
    alignment_probe,
    bits_per_dim,
    class_silhouette,
    cycle_audit,
    latent_projection,
    oracle_probe,
    pca_project,
    perturb_parameter,
    read_projection,
    read_report_csv,
    train_oracle,
)
from cdcgen.flow import ImageFlow, VectorFlow
from conftest import randomize


def test_identity_flow_bits_per_dim_matches_gaussian_entropy():
    x = np.random.default_rng(0).standard_normal((20000, 2))
    analytic = 0.5 * math.log(2 * math.pi * math.e) / math.log(2)
    assert round(analytic, 3) == 2.047
    assert abs(bits_per_dim(VectorFlow(2, 2, 8, np.random.default_rng(0)), x) - analytic) < 0.05


def test_trained_flow_has_lower_bpd(pinwheel_pair, trained_flow_2d):
    x = pinwheel_pair[0].samples
    assert bits_per_dim(trained_flow_2d, x) < bits_per_dim(VectorFlow(2, 8, 64, np.random.default_rng(0)), x)


def test_image_bpd_finite_and_seeded():
    flow = ImageFlow((1, 8, 8), 2, 4, 1, np.random.default_rng(0))
    imgs = np.random.default_rng(1).integers(0, 256, (6, 1, 8, 8))
    a = bits_per_dim(flow, imgs, seed=3)
    assert np.isfinite(a) and a == bits_per_dim(flow, imgs, seed=3)


def test_cycle_audit_identity_is_exact():
    fs = VectorFlow(2, 4, 8, np.random.default_rng(0))
    ft = VectorFlow(2, 4, 8, np.random.default_rng(1))
    x = np.random.default_rng(2).standard_normal((100, 2))
    out = cycle_audit(fs, ft, x, x)
    assert out["cycle_max_s"] == 0.0 and out["cycle_max_t"] == 0.0


def test_cycle_audit_random_parameters_and_fault_injection():
    rng = np.random.default_rng(3)
    fs = randomize(VectorFlow(2, 8, 64, rng), rng)
    ft = randomize(VectorFlow(2, 8, 64, rng), rng)
    x = rng.uniform(-5, 5, (500, 2))
    out = cycle_audit(fs, ft, x, x, n=400)
    assert 0 < max(out["cycle_max_s"], out["cycle_max_t"]) < 1e-8
    undo = []
    bad = cycle_audit(fs, ft, x, n=400, inject=lambda: undo.append(perturb_parameter(ft, 1e-1, seed=0)))
    assert bad["cycle_max_s"] > 1e-3
    undo[0]()
    assert cycle_audit(fs, ft, x)["cycle_max_s"] < 1e-8


def test_cycle_error_grows_with_conditioning():
    # the identity is algebraic, but float64 roundoff is amplified by the flows' expansion;
    # saturated log-scales with large shifts leave the 1e-8 regime
    errs = []
    for gain in (0.5, 2.0):
        rng = np.random.default_rng(0)
        fs = randomize(VectorFlow(2, 8, 64, rng), rng, gain)
        ft = randomize(VectorFlow(2, 8, 64, rng), rng, gain)
        errs.append(cycle_audit(fs, ft, rng.uniform(-5, 5, (500, 2)))["cycle_max_s"])
    assert errs[0] < 1e-12 and errs[1] > 1e-8


def test_cycle_audit_n_bound():
    f = VectorFlow(2, 2, 8, np.random.default_rng(0))
    with pytest.raises(ValueError):
        cycle_audit(f, f, np.zeros((5, 2)), n=6)


def test_alignment_probe_extremes():
    rng = np.random.default_rng(4)
    same = alignment_probe(rng.standard_normal((2000, 2)), rng.standard_normal((2000, 2)))
    assert abs(same - 0.5) < 0.05
    apart = alignment_probe(rng.standard_normal((500, 2)), rng.standard_normal((500, 2)) + 20.0)
    assert apart > 0.99


def test_alignment_probe_balances_domains():
    rng = np.random.default_rng(5)
    # wildly unequal sizes of the same distribution still give chance accuracy
    assert abs(alignment_probe(rng.standard_normal((3000, 2)), rng.standard_normal((300, 2))) - 0.5) < 0.1


@pytest.fixture(scope="module")
def oracle(pinwheel_pair):
    _, target, side = pinwheel_pair
    return train_oracle(target.samples, side.reveal("eval"), seed=0)


def test_oracle_is_valid_on_pinwheel(oracle):
    assert oracle.valid and oracle.accuracy >= 0.95


def test_oracle_self_consistency(oracle):
    xb, yb = oracle.test_split
    assert oracle_probe(oracle, xb, yb) == oracle.accuracy


def test_weak_oracle_is_reported_invalid():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((300, 2))
    weak = train_oracle(x, rng.integers(0, 3, 300))
    assert not weak.valid
    with pytest.raises(ProbeInvalid):
        oracle_probe(weak, x, np.zeros(300, int))
    assert 0 <= oracle_probe(weak, x, np.zeros(300, int), strict=False) <= 1


def test_untrained_encoder_is_at_chance(oracle):
    # chance holds in expectation over random encoders, not for any single draw
    flow = VectorFlow(2, 2, 8, np.random.default_rng(9))
    n, accs = 200, []
    for seed in range(40):
        enc = VectorEncoder(3, 8, 2, np.random.default_rng(100 + seed))
        samples = np.concatenate([synthesize(enc, flow, k, n, seed=k) for k in range(3)])
        accs.append(oracle_probe(oracle, samples, np.repeat(np.arange(3), n)))
    accs = np.array(accs)
    assert abs(accs.mean() - 1 / 3) < 3 * accs.std() / math.sqrt(len(accs))


def test_silhouette():
    rng = np.random.default_rng(10)
    z = np.r_[rng.standard_normal((100, 2)) * 0.1, rng.standard_normal((100, 2)) * 0.1 + 5]
    assert class_silhouette(z, np.repeat([0, 1], 100)) > 0.9
    assert abs(class_silhouette(z, np.tile([0, 1], 100))) < 0.1


def test_pca_axis_aligned_2d_preserves_distances():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((50, 2)) * [3.0, 0.5]
    p = pca_project(x)
    d = lambda a: np.linalg.norm(a[:, None] - a[None], axis=-1)
    assert np.allclose(d(p), d(x), atol=1e-10)
    assert p[:, 0].var() >= p[:, 1].var()


def test_pca_duplicates_and_sign_convention():
    rng = np.random.default_rng(12)
    x = rng.standard_normal((40, 5))
    x[7] = x[3]
    p = pca_project(x)
    assert np.array_equal(p[3], p[7])
    assert np.array_equal(p, pca_project(x))
    assert np.allclose(pca_project(-x), -p, atol=1e-12)
    # axis-aligned data: the dominant axis has a positive loading, so pc1 is the centered x coordinate
    y = np.array([(a, b) for a in (-3.0, -1.0, 2.0, 6.0) for b in (-0.3, 0.3)])
    assert np.allclose(pca_project(y)[:, 0], y[:, 0] - y[:, 0].mean(), atol=1e-12)
    with pytest.raises(ValueError):
        pca_project(x[:2])


def test_projection_csv(tmp_path):
    z = np.random.default_rng(13).standard_normal((10, 4))
    coords = latent_projection(z, np.arange(10) % 2, ["source"] * 5 + ["target"] * 5, tmp_path / "p.csv")
    rows = read_projection(tmp_path / "p.csv")
    assert list(rows[0]) == ["pc1", "pc2", "class", "domain"]
    assert float(rows[4]["pc2"]) == coords[4, 1] and rows[9]["domain"] == "target"


def test_report_csv_and_summary(tmp_path):
    rep = EvalReport({"b": 0.25, "a": 1.0}, {"seed": 0}, "abc123")
    rep.write_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text() == "metric,value\na,1.0\nb,0.25\n"
    assert read_report_csv(tmp_path / "r.csv") == {"a": 1.0, "b": 0.25}
    text = rep.summary()
    assert "abc123" in text and rep.timestamp in text
    with pytest.raises(ValueError):
        EvalReport({"x": float("nan")})
