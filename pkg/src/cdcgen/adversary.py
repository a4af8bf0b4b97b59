"""Sample-space critics, the latent domain classifier, and alignment losses.

Sign convention: every loss here is written so that the side it names
*minimizes* it.  The critic loss is the negated mini-max value
``-[E log C(real) + E log(1 - C(fake))]``; flows minimize the
non-saturating ``-E log C(fake)``.
"""

import numpy as np

from cdcgen.diffmath import MLP, Conv2d, Module, NonFiniteError, Tensor, ops

LOGIT_CLAMP = 15.0


def _finite(t, name):
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"{name} is not finite")
    return t


def clamped_prob(logits):
    return ops.sigmoid(ops.clip(logits, -LOGIT_CLAMP, LOGIT_CLAMP))


def log_real(logits):
    return ops.log(clamped_prob(logits))


def log_fake(logits):
    return ops.log(clamped_prob(ops.neg(logits)))


class VectorCritic(Module):
    def __init__(self, dim, rng, hidden=64):
        super().__init__()
        self.dim = dim
        self.hidden = hidden
        self.net = MLP([dim, hidden, hidden, 1], rng)

    def config(self):
        return {"kind": "vector", "dim": self.dim, "hidden": self.hidden}

    def logits(self, x):
        x = x if isinstance(x, Tensor) else Tensor(x)
        return ops.reshape(self.net(x), (x.shape[0],))

    def forward(self, x):
        return clamped_prob(self.logits(x))


class PatchCritic(Module):
    """Convolutional patch discriminator: stride-2 blocks doubling from ``base`` filters.

    Patch logits are averaged to one logit per sample.
    """

    def __init__(self, channels, rng, base=16, depth=3):
        super().__init__()
        self.channels = channels
        self.base = base
        self.depth = depth
        self.convs = []
        c_in = channels
        for i in range(depth):
            conv = Conv2d(c_in, base * 2**i, 4, rng, stride=2, padding=1)
            setattr(self, f"conv{i}", conv)
            self.convs.append(conv)
            c_in = base * 2**i
        self.head = Conv2d(c_in, 1, 3, rng, padding=1)

    def config(self):
        return {"kind": "patch", "channels": self.channels, "base": self.base, "depth": self.depth}

    def logits(self, x):
        h = x if isinstance(x, Tensor) else Tensor(x)
        for conv in self.convs:
            h = ops.leaky_relu(conv(h))
        p = self.head(h)
        return ops.mean(ops.reshape(p, (p.shape[0], -1)), axis=1)

    def forward(self, x):
        return clamped_prob(self.logits(x))


class DomainClassifier(Module):
    """Three-layer classifier over flattened latents; class 0 = source, 1 = target."""

    def __init__(self, latent_dim, rng, hidden=64):
        super().__init__()
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.net = MLP([latent_dim, hidden, hidden, 2], rng)

    def config(self):
        return {"latent_dim": self.latent_dim, "hidden": self.hidden}

    def logits(self, z):
        return self.net(z if isinstance(z, Tensor) else Tensor(z))

    def posterior(self, z):
        lg = self.logits(z).data
        return np.exp(ops.log_softmax_np(lg))

    forward = logits


def build_critic(cfg, rng):
    if cfg["kind"] == "vector":
        return VectorCritic(int(cfg["dim"]), rng, int(cfg.get("hidden", 64)))
    if cfg["kind"] == "patch":
        return PatchCritic(int(cfg["channels"]), rng, int(cfg.get("base", 16)), int(cfg.get("depth", 3)))
    raise ValueError(f"unknown critic kind {cfg['kind']!r}")


def adv_critic_loss(critic, real, fake):
    """-[mean log C(real) + mean log(1 - C(fake))]; pass ``fake`` detached."""
    loss = -(ops.mean(log_real(critic.logits(real))) + ops.mean(log_fake(critic.logits(fake))))
    return _finite(loss, "critic loss")


def adv_generator_loss(critic, fake):
    """Non-saturating generator side: -mean log C(fake)."""
    return _finite(-ops.mean(log_real(critic.logits(fake))), "generator loss")


def domain_confusion(classifier, z):
    """Cross-entropy of the classifier's posterior against the uniform domain distribution."""
    logits = classifier.logits(z)
    return ops.softmax_cross_entropy(logits, np.full(logits.shape, 0.5))


def dal_loss(classifier, z_s, z_t):
    """Returns (classifier_loss, confusion_loss) over the pooled batch.

    The classifier minimizes cross-entropy against the true domain tags; the
    flows minimize cross-entropy against the uniform distribution.
    """
    z_s = z_s.z if hasattr(z_s, "z") else z_s
    z_t = z_t.z if hasattr(z_t, "z") else z_t
    if len(z_s) == 0 or len(z_t) == 0:
        raise ValueError("dal_loss needs non-empty batches from both domains")
    logits = ops.concat([classifier.logits(z_s), classifier.logits(z_t)], axis=0)
    tags = np.concatenate([np.zeros(len(z_s), dtype=int), np.ones(len(z_t), dtype=int)])
    cls = ops.softmax_cross_entropy(logits, tags)
    conf = ops.softmax_cross_entropy(logits, np.full(logits.shape, 0.5))
    return _finite(cls, "domain classifier loss"), _finite(conf, "domain confusion loss")
