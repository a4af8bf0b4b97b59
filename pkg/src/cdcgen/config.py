"""Run configuration: INI files with a validated schema.

Sections and keys (all optional unless marked required)::

    [run]      name (required), seed, output_dir
    [data]     kind = pinwheel | digits | idx
               pinwheel: classes, n_per_class, rotation, scale, radial_std,
                         tangential_std, rate, arm_span, radius
               digits:   size, target_transform = invert | transpose
               idx:      source_images, source_labels, source_test_images,
                         source_test_labels, target_images, target_labels,
                         target_test_images, target_test_labels, size,
                         per_class_train, per_class_test
    [flow]     kind = vector | image; vector: n_layers, hidden;
               image: n_scales, n_channels, n_blocks
    [flow_t]   same keys as [flow]; overrides for the target flow only
    [critic]   hidden (vector data); base, depth (image data)
    [align]    lambda_s, lambda_t, gamma_s, gamma_t, adv_weight, lr,
               batch_size, steps, critic_steps, log_every, checkpoint_every
    [cond]     beta_e, beta_cr, beta_cl, lr, batch_size, steps, log_every,
               checkpoint_every
    [encoder]  noise_dim, hidden (vector); channels, scales (image, comma lists)
    [latent_critic]  hidden (vector); channels (image, comma list)

The ``seed`` under [run] seeds data generation and both training phases.
Every violation is reported with the file and line it came from.
"""

import configparser
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from cdcgen.condsynth import IMAGE_CRITIC_CHANNELS, IMAGE_ENCODER_CHANNELS, IMAGE_ENCODER_SCALES, CondConfig
from cdcgen.trainer.loops import AlignConfig


class ConfigError(ValueError):
    def __init__(self, message, source="<config>", line=None):
        where = f"{source}:{line}" if line else source
        super().__init__(f"{where}: {message}")
        self.source = source
        self.line = line


def _int(v):
    return int(v)


def _float(v):
    x = float(v)
    if not math.isfinite(x):
        raise ValueError("must be finite")
    return x


def _str(v):
    return str(v)


def _ints(v):
    return [int(p) for p in str(v).split(",") if p.strip()]


def _choice(*options):
    def conv(v):
        if v not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return v
    return conv


FLOW_KEYS = {"kind": _choice("vector", "image"), "n_layers": _int, "hidden": _int,
             "n_scales": _int, "n_channels": _int, "n_blocks": _int}

SCHEMA = {
    "run": {"name": _str, "seed": _int, "output_dir": _str},
    "data": {"kind": _choice("pinwheel", "digits", "idx"),
             "classes": _int, "n_per_class": _int, "rotation": _float, "scale": _float,
             "radial_std": _float, "tangential_std": _float, "rate": _float, "arm_span": _float,
             "radius": _float, "size": _int, "target_transform": _choice("invert", "transpose"),
             "source_images": _str, "source_labels": _str, "source_test_images": _str,
             "source_test_labels": _str, "target_images": _str, "target_labels": _str,
             "target_test_images": _str, "target_test_labels": _str,
             "per_class_train": _int, "per_class_test": _int},
    "flow": FLOW_KEYS,
    "flow_t": FLOW_KEYS,
    "critic": {"hidden": _int, "base": _int, "depth": _int},
    "align": {"lambda_s": _float, "lambda_t": _float, "gamma_s": _float, "gamma_t": _float,
              "adv_weight": _float, "lr": _float, "batch_size": _int, "steps": _int,
              "critic_steps": _int, "log_every": _int, "checkpoint_every": _int},
    "cond": {"beta_e": _float, "beta_cr": _float, "beta_cl": _float, "lr": _float, "batch_size": _int,
             "steps": _int, "log_every": _int, "checkpoint_every": _int},
    "encoder": {"noise_dim": _int, "hidden": _int, "channels": _ints, "scales": _ints},
    "latent_critic": {"hidden": _int, "channels": _ints},
}
REQUIRED = {"run": ("name",)}
VECTOR_NOISE_DIM = 8
IMAGE_NOISE_DIM = 64


@dataclass
class RunConfig:
    name: str
    seed: int = 0
    output_dir: str = ""
    data: dict = field(default_factory=lambda: {"kind": "pinwheel"})
    flow: dict = field(default_factory=lambda: {"kind": "vector"})
    flow_t: dict = field(default_factory=dict)
    critic: dict = field(default_factory=dict)
    align: AlignConfig = field(default_factory=AlignConfig)
    cond: CondConfig = field(default_factory=CondConfig)
    encoder: dict = field(default_factory=dict)
    latent_critic: dict = field(default_factory=dict)

    def to_dict(self):
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["align"] = AlignConfig(**d.get("align", {}))
        d["cond"] = CondConfig(**d.get("cond", {}))
        return cls(**d)

    def to_ini(self):
        cp = configparser.ConfigParser(interpolation=None)
        cp["run"] = {"name": self.name, "seed": str(self.seed)}
        if self.output_dir:
            cp["run"]["output_dir"] = self.output_dir
        for section in ("data", "flow", "flow_t", "critic", "encoder", "latent_critic"):
            values = getattr(self, section)
            if values:
                cp[section] = {k: ",".join(map(str, v)) if isinstance(v, list) else repr(v) if isinstance(v, float)
                               else str(v) for k, v in values.items()}
        skip = {"seed"}
        cp["align"] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in asdict(self.align).items()
                       if k not in skip}
        cp["cond"] = {k: repr(v) if isinstance(v, float) else str(v) for k, v in asdict(self.cond).items()
                      if k not in skip}
        return cp


def _key_lines(text):
    """(section, key) -> 1-based line number, plus section -> line."""
    keys, sections = {}, {}
    section = None
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            sections.setdefault(section, i)
            continue
        for sep in ("=", ":"):
            if sep in line:
                keys.setdefault((section, line.split(sep, 1)[0].strip().lower()), i)
                break
    return keys, sections


def parse_config(text, source="<config>"):
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(getattr(exc, "message", str(exc)).splitlines()[0], source,
                          getattr(exc, "lineno", None)) from exc
    keys, sections = _key_lines(text)
    values = {}
    for section in cp.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown section [{section}]", source, sections.get(section))
        out = {}
        for key, raw in cp[section].items():
            line = keys.get((section, key))
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]", source, line)
            try:
                out[key] = SCHEMA[section][key](raw.strip())
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key} = {raw!r}: {exc}", source, line) from exc
        values[section] = out
    for section, req in REQUIRED.items():
        for key in req:
            if key not in values.get(section, {}):
                raise ConfigError(f"missing required key {key!r} in [{section}]", source, sections.get(section))
    run = values.get("run", {})
    seed = run.get("seed", 0)

    def build(cls, section):
        try:
            return cls(seed=seed, **values.get(section, {}))
        except ValueError as exc:
            raise ConfigError(f"[{section}] {exc}", source, sections.get(section)) from exc

    cfg = RunConfig(name=run["name"], seed=seed, output_dir=run.get("output_dir", ""),
                    data=values.get("data", {"kind": "pinwheel"}), flow=values.get("flow", {"kind": "vector"}),
                    flow_t=values.get("flow_t", {}), critic=values.get("critic", {}),
                    align=build(AlignConfig, "align"), cond=build(CondConfig, "cond"),
                    encoder=values.get("encoder", {}), latent_critic=values.get("latent_critic", {}))
    cfg.data.setdefault("kind", "pinwheel")
    cfg.flow.setdefault("kind", "vector")
    return cfg


def load_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError("config file not found", str(path))
    return parse_config(path.read_text(), str(path))


def dump_config(cfg, path):
    with open(path, "w") as fh:
        cfg.to_ini().write(fh)


# --- model configs derived from a RunConfig -----------------------------------

def flow_configs(cfg, sample_shape):
    base = dict(cfg.flow)
    kind = base.pop("kind", "vector")
    out = []
    for overrides in ({}, cfg.flow_t):
        d = dict(base, **{k: v for k, v in overrides.items() if k != "kind"})
        if kind == "vector":
            out.append({"kind": "vector", "dim": int(sample_shape[0]), "n_layers": d.get("n_layers", 8),
                        "hidden": d.get("hidden", 64)})
        else:
            out.append({"kind": "image", "input_shape": list(sample_shape), "n_scales": d.get("n_scales", 2),
                        "n_channels": d.get("n_channels", 64), "n_blocks": d.get("n_blocks", 8)})
    return out


def model_configs(cfg, sample_shape):
    flow_s, flow_t = flow_configs(cfg, sample_shape)
    if flow_s["kind"] == "vector":
        critic = {"kind": "vector", "dim": int(sample_shape[0]), "hidden": cfg.critic.get("hidden", 64)}
    else:
        critic = {"kind": "patch", "channels": int(sample_shape[0]), "base": cfg.critic.get("base", 16),
                  "depth": cfg.critic.get("depth", 3)}
    return {"flow_s": flow_s, "flow_t": flow_t, "critic_s": dict(critic), "critic_t": dict(critic),
            "dal": {"hidden": cfg.critic.get("hidden", 64)}}


def cond_model_configs(cfg, sample_shape, n_classes):
    if cfg.flow.get("kind", "vector") == "vector":
        dim = int(sample_shape[0])
        hidden = cfg.encoder.get("hidden", 64)
        return {"encoder": {"kind": "vector", "n_classes": n_classes, "noise_dim": cfg.encoder.get("noise_dim", VECTOR_NOISE_DIM),
                            "latent_dim": dim, "hidden": hidden},
                "latent_critic": {"kind": "vector", "latent_dim": dim, "n_classes": n_classes,
                                  "hidden": cfg.latent_critic.get("hidden", 64)}}
    shape = list(sample_shape)
    return {"encoder": {"kind": "image", "n_classes": n_classes, "noise_dim": cfg.encoder.get("noise_dim", IMAGE_NOISE_DIM),
                        "latent_shape": shape,
                        "channels": cfg.encoder.get("channels", list(IMAGE_ENCODER_CHANNELS)),
                        "scales": cfg.encoder.get("scales", list(IMAGE_ENCODER_SCALES))},
            "latent_critic": {"kind": "image", "latent_shape": shape, "n_classes": n_classes,
                              "channels": cfg.latent_critic.get("channels", list(IMAGE_CRITIC_CHANNELS))}}


# --- defaults ------------------------------------------------------------------

PINWHEEL_INI = """\
# Desk-scale 2-D benchmark: K=3 pinwheel, target rotated 90 degrees and scaled 0.7.
[run]
name = pinwheel
seed = 0

[data]
kind = pinwheel
classes = 3
n_per_class = 1000
rotation = 1.5707963267948966
scale = 0.7

[flow]
kind = vector
n_layers = 8
hidden = 64

[critic]
hidden = 64

[align]
lambda_s = 1.0
lambda_t = 1.0
# stronger latent confusion than the 0.1 default keeps the class correspondence from drifting
gamma_s = 3.0
gamma_t = 3.0
adv_weight = 1.0
# benchmark override of the 1e-6 default, see README
lr = 5e-4
batch_size = 128
steps = 3000
critic_steps = 1
log_every = 100

[cond]
beta_e = 1.0
beta_cr = 1.0
beta_cl = 1.0
lr = 1e-3
batch_size = 128
steps = 1500
log_every = 100

[encoder]
noise_dim = 8
hidden = 64
"""

DIGITS_INI = """\
# Image-scale smoke run on scikit-learn digits at 16x16; target = inverted digits.
[run]
name = digits
seed = 0

[data]
kind = digits
size = 16
target_transform = invert

[flow]
kind = image
n_scales = 2
n_channels = 8
n_blocks = 1

[critic]
base = 8
depth = 2

[align]
lr = 1e-4
batch_size = 8
steps = 200
log_every = 20

[cond]
lr = 2e-4
batch_size = 8
steps = 200
log_every = 20

[encoder]
channels = 32,16
scales = 2,2

[latent_critic]
channels = 8,16
"""

DEFAULTS = {"pinwheel": PINWHEEL_INI, "digits": DIGITS_INI}


def default_config(name):
    if name not in DEFAULTS:
        raise KeyError(f"no default config {name!r}; choose from {sorted(DEFAULTS)}")
    return parse_config(DEFAULTS[name], f"<default:{name}>")
