import numpy as np
import pytest

from cdcgen.data import Dataset, LabelAccessError, SOURCE, TARGET
from cdcgen.diffmath import Tensor, no_grad
from cdcgen.eval import latents
from cdcgen.condsynth import CondConfig
from cdcgen.trainer.checkpoint import load_checkpoint
from cdcgen.trainer.loops import (
    ALIGN_COMPONENTS,
    AlignConfig,
    AlignModels,
    TrainingDiverged,
    align_optimizers,
    align_step,
    assert_disjoint,
    default_vector_models,
    prepare_batch,
    read_metrics,
    restore_conditional,
    streams,
    train_alignment,
    train_conditional,
    train_mle,
)
from cdcgen.trainer.optim import Adam

SMALL = default_vector_models(2, n_layers=2, hidden=16)


def _gauss(seed, n=512, shift=0.0, tag=SOURCE, labels=False):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 2)) * [1.5, 0.5] + shift
    y = (x[:, 0] > shift).astype(int) if labels else None
    return Dataset(x, y, tag, "gauss", 2)


def _models(seed=0):
    return AlignModels(SMALL, streams(seed))


def _batches(seed=1):
    rng = np.random.default_rng(seed)
    return prepare_batch(rng.standard_normal((16, 2)), rng), prepare_batch(rng.standard_normal((16, 2)) + 2, rng)


def test_config_validation():
    with pytest.raises(ValueError):
        AlignConfig(gamma_s=-0.1)
    with pytest.raises(ValueError):
        AlignConfig(batch_size=1)
    assert AlignConfig().lr == 1e-6
    assert CondConfig().lr == 2e-5


def test_weight_ablation_pure_adversarial():
    models = _models()
    cfg = AlignConfig(lambda_s=0, lambda_t=0, gamma_s=0, gamma_t=0, adv_weight=1.0)
    out = align_step(models, align_optimizers(models, 1e-3), *_batches(), cfg)
    for k in ("nll_s", "nll_t", "confusion_s", "confusion_t"):
        assert out[k] == 0.0
    assert out["gen_s2t"] > 0 and out["gen_t2s"] > 0 and out["critic_s"] > 0
    assert out["flow_total"] == pytest.approx(out["gen_s2t"] + out["gen_t2s"])


def test_weight_ablation_pure_mle_leaves_opponents_untouched():
    models = _models()
    before = {n: p.data.copy() for n, p in models.named_parameters("critic_s", "critic_t", "dal")}
    cfg = AlignConfig(gamma_s=0, gamma_t=0, adv_weight=0)
    out = align_step(models, align_optimizers(models, 1e-3), *_batches(), cfg)
    assert all(out[k] == 0.0 for k in ("critic_s", "critic_t", "dal_classifier", "gen_s2t", "gen_t2s"))
    assert out["flow_total"] == pytest.approx(out["nll_s"] + out["nll_t"])
    for n, p in models.named_parameters("critic_s", "critic_t", "dal"):
        assert np.array_equal(p.data, before[n])


def test_full_step_reports_every_component():
    models = _models()
    out = align_step(models, align_optimizers(models, 1e-3), *_batches(), AlignConfig())
    assert set(out) == set(ALIGN_COMPONENTS)
    assert all(np.isfinite(v) and v != 0.0 for v in out.values())


def test_mle_descends_on_gaussian_data():
    cfg = AlignConfig(lambda_t=0, gamma_s=0, gamma_t=0, adv_weight=0, lr=1e-3, batch_size=64, steps=200)
    _, hist = train_mle(_gauss(0), SMALL["flow_s"], cfg)
    assert np.mean(hist[-20:]) < np.mean(hist[:20]) - 0.1


def test_zero_adversarial_weights_equal_independent_mle_runs():
    cfg = AlignConfig(gamma_s=0, gamma_t=0, adv_weight=0, lr=1e-3, batch_size=32, steps=30, seed=4)
    _, models = train_alignment(_gauss(1), _gauss(2, shift=3.0, tag=TARGET), cfg, SMALL)
    ref_s, _ = train_mle(_gauss(1), SMALL["flow_s"], cfg, "s")
    ref_t, _ = train_mle(_gauss(2, shift=3.0, tag=TARGET), SMALL["flow_t"], cfg, "t")
    for flow, ref in ((models.flow_s, ref_s), (models.flow_t, ref_t)):
        for (_, p), (_, q) in zip(flow.named_parameters(), ref.named_parameters()):
            assert p.data.tobytes() == q.data.tobytes()


def _run(tmp_path, name, cfg, resume=None):
    out = tmp_path / name
    train_alignment(_gauss(5), _gauss(6, shift=2.0, tag=TARGET), cfg, SMALL, out_dir=out, resume=resume)
    return out


def test_alignment_is_deterministic(tmp_path):
    cfg = AlignConfig(lr=1e-3, batch_size=16, steps=12, log_every=3, seed=2)
    a, b = _run(tmp_path, "a", cfg), _run(tmp_path, "b", cfg)
    assert (a / "align.ckpt").read_bytes() == (b / "align.ckpt").read_bytes()
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    rows = read_metrics(a / "metrics.csv")
    assert [r["step"] for r in rows] == [0, 3, 6, 9, 11]
    assert (a / "metrics_timing.csv").exists()


def test_resume_continues_identically(tmp_path):
    cfg = AlignConfig(lr=1e-3, batch_size=16, steps=20, log_every=5, checkpoint_every=10, seed=3)
    full = _run(tmp_path, "full", cfg)
    mid = load_checkpoint(full / "align_10.ckpt")
    assert mid.step == 10
    resumed = _run(tmp_path, "resumed", cfg, resume=mid)
    assert (full / "align.ckpt").read_bytes() == (resumed / "align.ckpt").read_bytes()
    tail = [r for r in read_metrics(full / "metrics.csv") if r["step"] >= 10]
    assert read_metrics(resumed / "metrics.csv") == tail


def test_optimizers_are_disjoint():
    models = _models()
    opts = align_optimizers(models, 1e-3)
    assert_disjoint(*opts.values())
    with pytest.raises(AssertionError):
        assert_disjoint(opts["flows"], Adam(models.named_parameters("flow_s"), 1e-3))


def test_non_finite_loss_aborts_with_step_and_component():
    models = _models()
    models.critic_t.net.layers[0].weight.data[0, 0] = np.nan
    with pytest.raises(TrainingDiverged) as info:
        align_step(models, align_optimizers(models, 1e-3), *_batches(), AlignConfig(), step=17)
    assert info.value.step == 17 and info.value.component == "critic_t"


def test_alignment_refuses_labeled_target():
    with pytest.raises(LabelAccessError):
        train_alignment(_gauss(0), _gauss(1, tag=TARGET, labels=True), AlignConfig(steps=1), SMALL)


@pytest.fixture(scope="module")
def cond_run(tmp_path_factory):
    """Short alignment then conditional training on two labeled Gaussian blobs."""
    out = tmp_path_factory.mktemp("cond")
    src = Dataset(np.r_[np.random.default_rng(0).standard_normal((300, 2)) * 0.4 + [-2, 0],
                        np.random.default_rng(1).standard_normal((300, 2)) * 0.4 + [2, 0]],
                  np.repeat([0, 1], 300), SOURCE, "blobs", 2)
    tgt = Dataset(src.samples[::-1] * 0.7, None, TARGET, "blobs-t", 2)
    acfg = AlignConfig(lr=1e-3, batch_size=32, steps=40, seed=0)
    align, models = train_alignment(src, tgt, acfg, SMALL)
    frozen = {n: p.data.copy() for n, p in models.named_parameters("flow_s", "flow_t")}
    ccfg = CondConfig(lr=1e-3, batch_size=64, steps=300, seed=0, log_every=50)
    ckpt, models2, cond = train_conditional(align, src, ccfg, target=tgt, out_dir=out)
    return dict(src=src, tgt=tgt, align=align, ckpt=ckpt, models=models2, cond=cond, frozen=frozen, out=out,
                ccfg=ccfg)


def test_conditional_keeps_flows_frozen(cond_run):
    for n, p in cond_run["models"].named_parameters("flow_s", "flow_t"):
        assert np.array_equal(p.data, cond_run["frozen"][n])
        assert np.array_equal(cond_run["ckpt"].params[n], cond_run["frozen"][n])


def test_conditional_is_reproducible(cond_run, tmp_path):
    train_conditional(cond_run["align"], cond_run["src"], cond_run["ccfg"], out_dir=tmp_path)
    assert (tmp_path / "cond.ckpt").read_bytes() == (cond_run["out"] / "cond.ckpt").read_bytes()
    assert (tmp_path / "cond_metrics.csv").read_bytes() == (cond_run["out"] / "cond_metrics.csv").read_bytes()


def test_conditional_checkpoint_restores(cond_run):
    models, cond = restore_conditional(load_checkpoint(cond_run["out"] / "cond.ckpt"))
    eps = Tensor(np.random.default_rng(0).standard_normal((4, cond.encoder.noise_dim)))
    c = np.eye(2)[[0, 1, 0, 1]]
    with no_grad():
        a = cond.encoder(c, eps).data
        b = cond_run["cond"].encoder(c, eps).data
    assert a.tobytes() == b.tobytes()


def test_latent_classifier_accuracy_on_heldout_source(cond_run):
    rng = np.random.default_rng(9)
    held = np.r_[rng.standard_normal((200, 2)) * 0.4 + [-2, 0], rng.standard_normal((200, 2)) * 0.4 + [2, 0]]
    z = latents(cond_run["models"].flow_s, held)
    with no_grad():
        _, logits = cond_run["cond"].critic.heads(Tensor(z))
    acc = np.mean(logits.data.argmax(axis=1) == np.repeat([0, 1], 200))
    assert acc > 0.95


def test_conditional_refuses_target_labels(cond_run):
    labeled = Dataset(cond_run["tgt"].samples, np.zeros(len(cond_run["tgt"]), int), TARGET, "t", 2)
    with pytest.raises(LabelAccessError):
        train_conditional(cond_run["align"], cond_run["src"], cond_run["ccfg"], target=labeled)
    with pytest.raises(LabelAccessError):
        train_conditional(cond_run["align"], labeled, cond_run["ccfg"])


def test_conditional_needs_alignment_checkpoint(cond_run):
    with pytest.raises(ValueError):
        train_conditional(cond_run["ckpt"], cond_run["src"], cond_run["ccfg"])
