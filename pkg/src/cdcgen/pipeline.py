"""Glue between a RunConfig and the library: datasets, training phases, evaluation."""

import hashlib

import numpy as np

from cdcgen import eval as ev
from cdcgen.condsynth import synthesize
from cdcgen.config import cond_model_configs, model_configs
from cdcgen.data import (SOURCE, TARGET, Dataset, EvalSidecar, balanced_resample, load_digits_domain, load_idx,
                         make_pinwheel_pair, resize_bilinear, to_pixels)
from cdcgen.diffmath import Tensor, no_grad
from cdcgen.flow import translate
from cdcgen.trainer import encode_checkpoint, restore_alignment, restore_conditional, train_alignment, train_conditional

HELDOUT_OFFSET = 10_007


class DomainData:
    """Training source (labeled), training target (unlabeled), the target's
    eval sidecar, and a held-out labeled source draw for evaluation."""

    def __init__(self, source, target, sidecar, heldout_source):
        self.source = source
        self.target = target
        self.sidecar = sidecar
        self.heldout_source = heldout_source

    @property
    def n_classes(self):
        return self.source.n_classes

    @property
    def sample_shape(self):
        return self.source.sample_shape()


def _pinwheel_kwargs(d):
    keys = ("classes", "n_per_class", "rotation", "scale")
    shape = ("radial_std", "tangential_std", "rate", "arm_span", "radius")
    out = {k: d[k] for k in keys if k in d}
    out.update({k: d[k] for k in shape if k in d})
    return out


def _resize_pixels(ds, size):
    imgs = ds.samples[:, 0] if ds.samples.ndim == 4 else ds.samples
    if imgs.shape[-1] != size:
        imgs = resize_bilinear(imgs, size, size)
    return Dataset(to_pixels(imgs)[:, None], ds.labels, ds.domain_tag, ds.name, ds.n_classes)


def build_data(cfg):
    d = cfg.data
    kind = d.get("kind", "pinwheel")
    if kind == "pinwheel":
        kw = _pinwheel_kwargs(d)
        source, target, sidecar = make_pinwheel_pair(seed=cfg.seed, **kw)
        held, _, _ = make_pinwheel_pair(seed=cfg.seed + HELDOUT_OFFSET, **kw)
        return DomainData(source, target, sidecar, held)
    if kind == "digits":
        size = d.get("size", 16)
        transform = d.get("target_transform", "invert")
        full = load_digits_domain(size)
        perm = np.random.default_rng(cfg.seed).permutation(len(full))
        a, b = perm[: len(perm) // 2], perm[len(perm) // 2:]
        src = full.subset(a)
        n_held = len(a) // 5
        held, src = src.subset(np.arange(n_held)), src.subset(np.arange(n_held, len(src)))
        tgt_px = full.samples[b]
        tgt_px = 255 - tgt_px if transform == "invert" else np.swapaxes(tgt_px, -1, -2)
        target = Dataset(np.ascontiguousarray(tgt_px), None, TARGET, f"digits{size}-{transform}", 10)
        return DomainData(src, target, EvalSidecar(full.labels[b], target.name), held)
    if kind == "idx":
        size = d.get("size", 32)
        tr_s = load_idx(d["source_images"], d["source_labels"], SOURCE, "source")
        te_s = load_idx(d["source_test_images"], d["source_test_labels"], SOURCE, "source-test")
        tr_t = load_idx(d["target_images"], d["target_labels"], TARGET, "target")
        te_t = load_idx(d["target_test_images"], d["target_test_labels"], TARGET, "target-test")
        ntr, nte = d.get("per_class_train", 542), d.get("per_class_test", 147)
        tr_s, te_s = balanced_resample(tr_s, te_s, ntr, nte, cfg.seed)
        tr_t, te_t = balanced_resample(tr_t, te_t, ntr, nte, cfg.seed + 1)
        tr_s, te_s, tr_t = (_resize_pixels(x, size) for x in (tr_s, te_s, tr_t))
        return DomainData(tr_s, tr_t.unlabeled(), EvalSidecar(tr_t.labels, tr_t.name), te_s)
    raise ValueError(f"unknown data kind {kind!r}")


def run_alignment(cfg, data, out_dir=None, on_log=None, resume=None):
    models_cfg = model_configs(cfg, data.sample_shape)
    return train_alignment(data.source, data.target, cfg.align, models_cfg, out_dir=out_dir, resume=resume,
                           extra_config={"run": cfg.to_dict()}, on_log=on_log)


def run_conditional(cfg, data, align_ckpt, out_dir=None, on_log=None):
    cm = cond_model_configs(cfg, data.sample_shape, data.n_classes)
    return train_conditional(align_ckpt, data.source, cfg.cond, cm, target=data.target, out_dir=out_dir,
                             extra_config={"run": cfg.to_dict()}, on_log=on_log)


def _flow_space(x):
    return ev._flow_input(None, x)


def evaluate(ckpt, data, suite="all", seed=0, n_per_class=200, projection_path=None):
    """Metrics for a Phase-1 (suite ``align``) or Phase-2 checkpoint."""
    if suite in ("cond", "all") and ckpt.phase != "cond":
        raise ValueError(f"suite {suite!r} needs a conditional checkpoint, got phase {ckpt.phase!r}")
    if ckpt.phase == "cond":
        models, cond = restore_conditional(ckpt)
    else:
        models, cond = restore_alignment(ckpt), None
    fs, ft = models.flow_s, models.flow_t
    metrics = {}
    target_labels = data.sidecar.reveal("eval")
    oracle = ev.train_oracle(data.target.samples, target_labels, seed)
    metrics["oracle_valid"] = float(oracle.valid)
    metrics["oracle_accuracy"] = oracle.accuracy
    if suite in ("align", "all"):
        xs, xt = _flow_space(data.source.samples), _flow_space(data.target.samples)
        metrics.update(ev.cycle_audit(fs, ft, xs, xt, n=min(1000, len(xs), len(xt))))
        metrics["bpd_s"] = ev.bits_per_dim(fs, data.source.samples, seed)
        metrics["bpd_t"] = ev.bits_per_dim(ft, data.target.samples, seed)
        zs, zt = ev.latents(fs, data.source.samples), ev.latents(ft, data.target.samples)
        metrics["alignment_probe"] = ev.alignment_probe(zs, zt, seed)
        pooled = np.concatenate([zs, zt])
        classes = np.r_[data.source.labels, target_labels]
        metrics["silhouette"] = ev.class_silhouette(pooled, classes)
        with no_grad():
            translated = ev.to_data_space(translate(fs, ft, Tensor(xs)).data)
        metrics["translation_accuracy"] = ev.oracle_probe(oracle, translated, data.source.labels, strict=False)
        if projection_path is not None:
            domains = [SOURCE] * len(zs) + [TARGET] * len(zt)
            ev.latent_projection(pooled, classes, domains, projection_path)
    if suite in ("cond", "all"):
        k = data.n_classes
        synth, cond_labels = [], []
        for c in range(k):
            synth.append(ev.to_data_space(synthesize(cond.encoder, ft, c, n_per_class, seed + c)))
            cond_labels.append(np.full(n_per_class, c))
        metrics["conditional_accuracy"] = ev.oracle_probe(oracle, np.concatenate(synth), np.concatenate(cond_labels),
                                                          strict=False)
        zh = ev.latents(fs, data.heldout_source.samples)
        with no_grad():
            _, cls = cond.critic.heads(Tensor(zh))
        metrics["latent_classifier_accuracy"] = float(np.mean(cls.data.argmax(axis=1) == data.heldout_source.labels))
    return ev.EvalReport(metrics, ckpt.config, ckpt_id(ckpt))


def ckpt_id(ckpt):
    return hashlib.sha256(encode_checkpoint(ckpt)).hexdigest()[:16]
