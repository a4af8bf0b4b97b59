"""Evaluation: cycle audit, bits/dim, probes, silhouette and PCA projections."""

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from datetime import datetime, timezone

import numpy as np
from sklearn.exceptions import ConvergenceWarning
from sklearn.metrics import silhouette_score
from sklearn.model_selection import train_test_split
from sklearn.neural_network import MLPClassifier

from cdcgen.diffmath import Tensor, no_grad
from cdcgen.flow import dequantize, quantize, standard_normal_log_prob, translate

LN2 = math.log(2.0)
ORACLE_MIN_ACCURACY = 0.95
PROBE_HIDDEN = (32, 32)


class ProbeInvalid(RuntimeError):
    pass


def _flow_input(flow, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        return dequantize(x, seed=0).values
    return x


def _max_abs(a, b):
    return np.abs(a - b).reshape(len(a), -1).max(axis=1)


def cycle_audit(flow_s, flow_t, x_s, x_t=None, n=None, inject=None):
    """Roundtrip errors of F_{t->s}(F_{s->t}(x)) and the reverse composition.

    Inputs are taken in flow space.  ``inject`` (optional) is called between
    the two legs of every roundtrip; the fault-injection control uses it to
    perturb a parameter mid-composition.  Returns max/mean inf-norm errors.
    """
    out = {}
    for tag, src, dst, x in (("s", flow_s, flow_t, x_s), ("t", flow_t, flow_s, x_t)):
        if x is None:
            continue
        x = np.asarray(x, dtype=np.float64)
        if n is not None:
            if n > len(x):
                raise ValueError(f"n={n} exceeds dataset size {len(x)}")
            x = x[:n]
        with no_grad():
            there = translate(src, dst, Tensor(x))
            if inject is not None:
                inject()
            back = translate(dst, src, there).data
        err = _max_abs(back, x)
        out[f"cycle_max_{tag}"] = float(err.max())
        out[f"cycle_mean_{tag}"] = float(err.mean())
    return out


def perturb_parameter(module, scale=1e-2, seed=0):
    """Fault injection: nudge one trainable parameter; returns an undo callback."""
    params = [p for p in module.parameters() if p.requires_grad]
    rng = np.random.default_rng(seed)
    p = params[int(rng.integers(len(params)))]
    saved = p.data.copy()
    p.data = p.data + scale * rng.standard_normal(p.data.shape)

    def undo():
        p.data = saved

    return undo


def bits_per_dim(flow, samples, seed=0, batch=512):
    """Mean NLL / (dim * log 2).

    Pixel images (N, C, H, W) in [0, 255] are dequantized first and the
    dequantization log-det is included, so the result is in bits per
    pixel-space dimension.  Vector data is used as is.
    """
    samples = np.asarray(samples, dtype=np.float64)
    total = 0.0
    for i in range(0, len(samples), batch):
        chunk = samples[i:i + batch]
        if chunk.ndim == 4:
            deq = dequantize(chunk, seed=seed + i)
            x, corr = deq.values, deq.log_det
        else:
            x, corr = chunk, np.zeros(len(chunk))
        with no_grad():
            z, ld = flow.forward(Tensor(x))
            lp = standard_normal_log_prob(z).data + ld.data + corr
        total += float(lp.sum())
    d = int(np.prod(samples.shape[1:]))
    return -total / (len(samples) * d * LN2)


def probe_features(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        return x.reshape(len(x), -1) / 255.0
    return x.reshape(len(x), -1)


def _fit(seed, x, y, max_iter=1000):
    model = MLPClassifier(PROBE_HIDDEN, max_iter=max_iter, random_state=seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return model.fit(x, y)


@dataclass
class Oracle:
    model: MLPClassifier
    accuracy: float
    min_accuracy: float = ORACLE_MIN_ACCURACY

    @property
    def valid(self):
        return self.accuracy >= self.min_accuracy

    def predict(self, x):
        return self.model.predict(probe_features(x))


def train_oracle(samples, labels, seed=0, min_accuracy=ORACLE_MIN_ACCURACY, test_size=0.3):
    """Fit the label oracle on held-out labeled target data (the eval sidecar).

    Its accuracy on a stratified test split decides validity.
    """
    feats = probe_features(samples)
    xa, xb, ya, yb = train_test_split(feats, np.asarray(labels), test_size=test_size, random_state=seed,
                                      stratify=labels)
    model = _fit(seed, xa, ya)
    oracle = Oracle(model, float(model.score(xb, yb)), min_accuracy)
    oracle.test_split = (xb, yb)
    return oracle


def oracle_probe(oracle, samples, conditioning, strict=True):
    """Fraction of ``samples`` the oracle assigns to their conditioning class."""
    if strict and not oracle.valid:
        raise ProbeInvalid(f"oracle accuracy {oracle.accuracy:.3f} < {oracle.min_accuracy}; report invalid")
    pred = oracle.predict(samples)
    return float(np.mean(pred == np.asarray(conditioning)))


def alignment_probe(latents_s, latents_t, seed=0):
    """Held-out domain-classification accuracy of a freshly trained probe.

    Both domains are subsampled to equal size so chance is exactly 50%.
    """
    zs = np.asarray(latents_s, dtype=np.float64)
    zt = np.asarray(latents_t, dtype=np.float64)
    m = min(len(zs), len(zt))
    rng = np.random.default_rng(seed)
    zs = zs[rng.permutation(len(zs))[:m]]
    zt = zt[rng.permutation(len(zt))[:m]]
    z = np.concatenate([zs, zt]).reshape(2 * m, -1)
    dom = np.r_[np.zeros(m), np.ones(m)]
    za, zb, da, db = train_test_split(z, dom, test_size=0.5, random_state=seed, stratify=dom)
    return float(_fit(seed, za, da, 300).score(zb, db))


def class_silhouette(latents, classes):
    z = np.asarray(latents, dtype=np.float64)
    return float(silhouette_score(z.reshape(len(z), -1), np.asarray(classes)))


def pca_project(x, k=2):
    """Top-``k`` principal coordinates with the largest-magnitude loading of each axis positive."""
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1)
    if len(x) < 3:
        raise ValueError("PCA projection needs at least 3 samples")
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    comps = vt[:k]
    for row in comps:
        j = np.argmax(np.abs(row))
        if row[j] < 0:
            row *= -1.0
    return centered @ comps.T


def latent_projection(latents, classes, domains, path=None):
    coords = pca_project(latents)
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["pc1", "pc2", "class", "domain"])
            for (a, b), c, d in zip(coords, classes, domains):
                w.writerow([repr(float(a)), repr(float(b)), int(c), d])
    return coords


def read_projection(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def latents(flow, samples):
    with no_grad():
        return flow.forward(Tensor(_flow_input(flow, samples))).z.data


def to_data_space(samples):
    """Synthesized or translated flow outputs in data space (pixels for images)."""
    x = np.asarray(samples)
    return quantize(x).astype(np.float64) if x.ndim == 4 else x


@dataclass
class EvalReport:
    metrics: dict
    config: dict = field(default_factory=dict)
    checkpoint: str = ""
    timestamp: str = field(default_factory=lambda: datetime.now(timezone.utc).isoformat(timespec="seconds"))

    def __post_init__(self):
        bad = [k for k, v in self.metrics.items() if not math.isfinite(float(v))]
        if bad:
            raise ValueError(f"non-finite metrics: {bad}")

    def write_csv(self, path):
        # no timestamp here: the CSV is a pure function of checkpoint, data and seed
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value"])
            for k in sorted(self.metrics):
                w.writerow([k, repr(float(self.metrics[k]))])

    def summary(self):
        lines = [f"checkpoint: {self.checkpoint}", f"generated: {self.timestamp}"]
        width = max((len(k) for k in self.metrics), default=0)
        lines += [f"  {k.ljust(width)}  {float(v):.6g}" for k, v in sorted(self.metrics.items())]
        lines.append("config: " + json.dumps(self.config, sort_keys=True))
        return "\n".join(lines) + "\n"


def read_report_csv(path):
    with open(path, newline="") as fh:
        return {r["metric"]: float(r["value"]) for r in csv.DictReader(fh)}
