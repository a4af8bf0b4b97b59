"""Latent-space auxiliary-classifier GAN: condition encoder, critic/classifier, losses."""

from dataclasses import dataclass

import numpy as np

from cdcgen.adversary import log_fake, log_real
from cdcgen.diffmath import MLP, Conv2d, ConvTranspose2d, Linear, Module, ModuleList, NonFiniteError, Tensor, no_grad, ops
from cdcgen.diffmath.tensor import ShapeError

IMAGE_ENCODER_CHANNELS = (256, 1024, 512, 256, 128, 64, 32, 16)
IMAGE_ENCODER_SCALES = (2, 2, 2, 2, 2, 1, 1, 1)
IMAGE_CRITIC_CHANNELS = (64, 128, 256, 512)


@dataclass
class CondConfig:
    beta_e: float = 1.0
    beta_cr: float = 1.0
    beta_cl: float = 1.0
    lr: float = 2e-5
    batch_size: int = 64
    steps: int = 1000
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("beta_e", "beta_cr", "beta_cl"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")


def one_hot(labels, k):
    labels = np.asarray(labels, dtype=int)
    if np.any((labels < 0) | (labels >= k)):
        raise ValueError(f"class index outside [0, {k})")
    out = np.zeros((len(labels), k))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def check_one_hot(c, k):
    c = np.asarray(c.data if isinstance(c, Tensor) else c, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != k:
        raise ValueError(f"condition must be (N, {k}) one-hot, got shape {c.shape}")
    if not (np.all((c == 0) | (c == 1)) and np.all(c.sum(axis=1) == 1)):
        raise ValueError("condition rows must contain exactly one 1")
    return c


class VectorEncoder(Module):
    """Four fully connected layers from (one-hot, noise) to a flat latent."""

    def __init__(self, n_classes, noise_dim, latent_dim, rng, hidden=64):
        super().__init__()
        self.n_classes = n_classes
        self.noise_dim = noise_dim
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.net = MLP([n_classes + noise_dim, hidden, hidden, hidden, latent_dim], rng)

    def config(self):
        return {"kind": "vector", "n_classes": self.n_classes, "noise_dim": self.noise_dim,
                "latent_dim": self.latent_dim, "hidden": self.hidden}

    def forward(self, c, eps):
        return self.net(ops.concat([Tensor(c), eps], axis=1))


class ImageEncoder(Module):
    """One fully connected layer, then transposed convolutions up to the latent image shape.

    The fully connected layer emits ``channels[0]`` maps at the base
    resolution; each transposed convolution ``i`` upsamples by ``scales[i]``
    and emits ``channels[i + 1]`` maps, the last one emitting the latent's
    channel count.
    """

    def __init__(self, n_classes, noise_dim, latent_shape, rng,
                 channels=IMAGE_ENCODER_CHANNELS, scales=IMAGE_ENCODER_SCALES):
        super().__init__()
        if len(channels) != len(scales):
            raise ValueError("channels and scales must have the same length")
        c, h, w = latent_shape
        up = int(np.prod(scales))
        if h % up or w % up:
            raise ValueError(f"latent {latent_shape} not reachable with upsampling {scales}")
        self.n_classes = n_classes
        self.noise_dim = noise_dim
        self.latent_shape = tuple(latent_shape)
        self.latent_dim = c * h * w
        self.channels = tuple(channels)
        self.scales = tuple(scales)
        self.base = (channels[0], h // up, w // up)
        self.fc = Linear(n_classes + noise_dim, int(np.prod(self.base)), rng)
        outs = list(channels[1:]) + [c]
        self.ups = ModuleList(
            ConvTranspose2d(a, b, s, rng) for a, b, s in zip(channels, outs, scales)
        )

    def config(self):
        return {"kind": "image", "n_classes": self.n_classes, "noise_dim": self.noise_dim,
                "latent_shape": list(self.latent_shape), "channels": list(self.channels),
                "scales": list(self.scales)}

    def forward(self, c, eps):
        h = self.fc(ops.concat([Tensor(c), eps], axis=1))
        h = ops.reshape(h, (h.shape[0],) + self.base)
        for up in self.ups:
            h = up(ops.leaky_relu(h))
        return ops.reshape(h, (h.shape[0], self.latent_dim))


class VectorLatentCritic(Module):
    """Shared fully connected trunk with a realness head and a class head."""

    def __init__(self, latent_dim, n_classes, rng, hidden=64):
        super().__init__()
        self.latent_dim = latent_dim
        self.n_classes = n_classes
        self.hidden = hidden
        self.trunk = MLP([latent_dim, hidden, hidden], rng)
        self.head_real = Linear(hidden, 1, rng)
        self.head_class = Linear(hidden, n_classes, rng)

    def config(self):
        return {"kind": "vector", "latent_dim": self.latent_dim, "n_classes": self.n_classes,
                "hidden": self.hidden}

    def features(self, z):
        return ops.leaky_relu(self.trunk(z))

    def heads(self, z):
        z = z if isinstance(z, Tensor) else Tensor(z)
        h = self.features(z)
        return ops.reshape(self.head_real(h), (z.shape[0],)), self.head_class(h)


class ImageLatentCritic(Module):
    """Four stride-2 convolutions over the latent image, then two linear heads."""

    def __init__(self, latent_shape, n_classes, rng, channels=IMAGE_CRITIC_CHANNELS):
        super().__init__()
        c, h, w = latent_shape
        if h % 2 ** len(channels) or w % 2 ** len(channels):
            raise ValueError(f"latent {latent_shape} too small for {len(channels)} stride-2 layers")
        self.latent_shape = tuple(latent_shape)
        self.latent_dim = c * h * w
        self.n_classes = n_classes
        self.channels = tuple(channels)
        self.convs = ModuleList()
        c_in = c
        for ch in channels:
            self.convs.append(Conv2d(c_in, ch, 4, rng, stride=2, padding=1))
            c_in = ch
        feat = c_in * (h // 2 ** len(channels)) * (w // 2 ** len(channels))
        self.head_real = Linear(feat, 1, rng)
        self.head_class = Linear(feat, n_classes, rng)

    def config(self):
        return {"kind": "image", "latent_shape": list(self.latent_shape), "n_classes": self.n_classes,
                "channels": list(self.channels)}

    def features(self, z):
        n = z.shape[0]
        h = ops.reshape(z, (n,) + self.latent_shape)
        for conv in self.convs:
            h = ops.leaky_relu(conv(h))
        return ops.reshape(h, (n, -1))

    def heads(self, z):
        z = z if isinstance(z, Tensor) else Tensor(z)
        h = self.features(z)
        return ops.reshape(self.head_real(h), (z.shape[0],)), self.head_class(h)


def trunk_parameters(critic):
    return [p for name, p in critic.named_parameters() if not name.startswith("head_")]


def build_encoder(cfg, rng):
    if cfg["kind"] == "vector":
        return VectorEncoder(int(cfg["n_classes"]), int(cfg["noise_dim"]), int(cfg["latent_dim"]), rng,
                             int(cfg.get("hidden", 64)))
    return ImageEncoder(int(cfg["n_classes"]), int(cfg["noise_dim"]), tuple(cfg["latent_shape"]), rng,
                        tuple(cfg["channels"]), tuple(cfg["scales"]))


def build_latent_critic(cfg, rng):
    if cfg["kind"] == "vector":
        return VectorLatentCritic(int(cfg["latent_dim"]), int(cfg["n_classes"]), rng, int(cfg.get("hidden", 64)))
    return ImageLatentCritic(tuple(cfg["latent_shape"]), int(cfg["n_classes"]), rng, tuple(cfg["channels"]))


def _finite(t, name):
    if not np.all(np.isfinite(t.data)):
        raise NonFiniteError(f"{name} is not finite")
    return t


def encode(encoder, c, eps):
    """Latent sample E(c, eps) for one-hot conditions ``c`` and noise ``eps``."""
    c = check_one_hot(c, encoder.n_classes)
    eps = eps if isinstance(eps, Tensor) else Tensor(eps)
    if eps.ndim != 2 or eps.shape != (c.shape[0], encoder.noise_dim):
        raise ShapeError(f"noise must be ({c.shape[0]}, {encoder.noise_dim}), got {eps.shape}")
    return encoder(c, eps)


def encoder_loss(critic, fake_z):
    """-mean log C(E(c, eps)); the encoder minimizes it."""
    real_logit, _ = critic.heads(fake_z)
    return _finite(-ops.mean(log_real(real_logit)), "encoder loss")


def latent_critic_loss(critic, fake_z, real_z):
    """-[mean log C(real_z) + mean log(1 - C(fake_z))]; pass ``fake_z`` detached."""
    real_logit, _ = critic.heads(real_z)
    fake_logit, _ = critic.heads(fake_z)
    loss = -(ops.mean(log_real(real_logit)) + ops.mean(log_fake(fake_logit)))
    return _finite(loss, "latent critic loss")


def _labels(labels, n, k, name):
    labels = np.asarray(labels)
    if labels.ndim == 2:
        labels = check_one_hot(labels, k).argmax(axis=1)
    if labels.shape != (n,):
        raise ValueError(f"{name}: {labels.shape[0] if labels.ndim else 0} labels for a batch of {n}")
    return labels.astype(int)


def classification_terms(critic, fake_z, real_z, fake_labels, real_labels):
    """Cross-entropy of the class head on the encoded and the real latents."""
    k = critic.n_classes
    fake_labels = _labels(fake_labels, len(fake_z), k, "fake labels")
    real_labels = _labels(real_labels, len(real_z), k, "real labels")
    _, fake_cls = critic.heads(fake_z)
    _, real_cls = critic.heads(real_z)
    return (ops.softmax_cross_entropy(fake_cls, fake_labels),
            ops.softmax_cross_entropy(real_cls, real_labels))


def classifier_loss(critic, fake_z, real_z, fake_labels, real_labels):
    fake_term, real_term = classification_terms(critic, fake_z, real_z, fake_labels, real_labels)
    return _finite(fake_term + real_term, "classifier loss")


def conditional_total_loss(cfg, parts):
    """beta_E * L_E + beta_Cr * L_CRITIC + beta_Cl * L_CLASSIFIER."""
    for name in ("beta_e", "beta_cr", "beta_cl"):
        if getattr(cfg, name) < 0:
            raise ValueError(f"{name} must be non-negative")
    l_e, l_cr, l_cl = parts
    return cfg.beta_e * l_e + cfg.beta_cr * l_cr + cfg.beta_cl * l_cl


def encoder_objective(cfg, critic, fake_z, fake_labels):
    """What the encoder minimizes: beta_E * L_E + beta_Cl * (fake classification term)."""
    real_logit, fake_cls = critic.heads(fake_z)
    l_e = _finite(-ops.mean(log_real(real_logit)), "encoder loss")
    ce = ops.softmax_cross_entropy(fake_cls, _labels(fake_labels, len(fake_z), critic.n_classes, "fake labels"))
    return l_e * cfg.beta_e + ce * cfg.beta_cl, l_e, ce


def critic_objective(cfg, critic, fake_z, real_z, fake_labels, real_labels):
    """What the critic/classifier minimizes: beta_Cr * L_CRITIC + beta_Cl * L_CLASSIFIER."""
    fake_z = fake_z.detach() if isinstance(fake_z, Tensor) else Tensor(fake_z)
    l_cr = latent_critic_loss(critic, fake_z, real_z)
    l_cl = classifier_loss(critic, fake_z, real_z, fake_labels, real_labels)
    return l_cr * cfg.beta_cr + l_cl * cfg.beta_cl, l_cr, l_cl


def synthesize(encoder, target_flow, class_index, n, seed):
    """Conditional target-domain samples F_t^{-1}(E(c, eps_i)) for ``n`` seeded noise draws."""
    k = encoder.n_classes
    if not 0 <= int(class_index) < k:
        raise ValueError(f"class index {class_index} outside [0, {k})")
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n, encoder.noise_dim))
    c = one_hot(np.full(n, int(class_index)), k)
    with no_grad():
        z = encode(encoder, c, Tensor(eps))
        x = target_flow.inverse(z)
    return x.data
