"""Phase 1 (domain alignment) and Phase 2 (conditional synthesis) training loops."""

import csv
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from cdcgen import condsynth
from cdcgen.adversary import adv_critic_loss, adv_generator_loss, build_critic, dal_loss, domain_confusion, DomainClassifier
from cdcgen.condsynth import CondConfig, build_encoder, build_latent_critic, one_hot
from cdcgen.data import TARGET, LabelAccessError, require_unlabeled_target
from cdcgen.diffmath import NonFiniteError, Tensor, backward, no_grad, ops
from cdcgen.flow import build_flow, dequantize, standard_normal_log_prob
from cdcgen.trainer.checkpoint import Checkpoint, save_checkpoint
from cdcgen.trainer.optim import Adam

LN2 = math.log(2.0)

# SeedSequence children, one per independent consumer
STREAM_INIT_S, STREAM_INIT_T, STREAM_INIT_ADV, STREAM_BATCH_S, STREAM_BATCH_T = range(5)
N_STREAMS = 5
PHASE_ALIGN = "align"
PHASE_COND = "cond"

ALIGN_COMPONENTS = ("critic_s", "critic_t", "dal_classifier", "gen_s2t", "gen_t2s",
                    "confusion_s", "confusion_t", "nll_s", "nll_t", "flow_total")
COND_COMPONENTS = ("latent_critic", "classifier", "critic_total", "encoder", "encoder_class", "encoder_total")


class TrainingDiverged(FloatingPointError):
    def __init__(self, step, component):
        super().__init__(f"non-finite {component} at step {step}")
        self.step = step
        self.component = component


@dataclass
class AlignConfig:
    lambda_s: float = 1.0
    lambda_t: float = 1.0
    gamma_s: float = 0.1
    gamma_t: float = 0.1
    adv_weight: float = 1.0
    lr: float = 1e-6
    batch_size: int = 64
    steps: int = 1000
    critic_steps: int = 1
    seed: int = 0
    log_every: int = 50
    checkpoint_every: int = 0

    def __post_init__(self):
        for name in ("lambda_s", "lambda_t", "gamma_s", "gamma_t", "adv_weight"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.batch_size < 2:
            raise ValueError("batch_size must be at least 2")
        if self.critic_steps < 0 or self.steps < 0:
            raise ValueError("steps and critic_steps must be non-negative")

    @property
    def adversarial(self):
        return self.adv_weight > 0 or self.gamma_s > 0 or self.gamma_t > 0


def config_from_dict(cls, d):
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**d)


def streams(seed):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(N_STREAMS)]


def rng_state(rng):
    return rng.bit_generator.state


def set_rng_state(rng, state):
    rng.bit_generator.state = state


# --- model groups -------------------------------------------------------------

class AlignModels:
    """The two flows plus their opponents, built from a model config dict.

    ``model_cfg`` has keys ``flow_s``, ``flow_t``, ``critic_s``, ``critic_t``
    and ``dal`` (``{"latent_dim": D, "hidden": H}``).
    """

    def __init__(self, model_cfg, rngs):
        self.cfg = model_cfg
        self.flow_s = build_flow(model_cfg["flow_s"], rngs[STREAM_INIT_S])
        self.flow_t = build_flow(model_cfg["flow_t"], rngs[STREAM_INIT_T])
        if self.flow_s.latent_dim != self.flow_t.latent_dim:
            raise ValueError("source and target flows must share the latent dimensionality")
        adv = rngs[STREAM_INIT_ADV]
        self.critic_s = build_critic(model_cfg["critic_s"], adv)
        self.critic_t = build_critic(model_cfg["critic_t"], adv)
        dal = model_cfg.get("dal", {})
        self.dal = DomainClassifier(self.flow_s.latent_dim, adv, int(dal.get("hidden", 64)))

    def groups(self):
        return {"flow_s": self.flow_s, "flow_t": self.flow_t, "critic_s": self.critic_s,
                "critic_t": self.critic_t, "dal": self.dal}

    def named_parameters(self, *names):
        names = names or tuple(self.groups())
        out = []
        for g in names:
            out.extend((f"{g}.{n}", p) for n, p in self.groups()[g].named_parameters())
        return out


def default_vector_models(dim=2, n_layers=8, hidden=64):
    flow = {"kind": "vector", "dim": dim, "n_layers": n_layers, "hidden": hidden}
    critic = {"kind": "vector", "dim": dim, "hidden": 64}
    return {"flow_s": dict(flow), "flow_t": dict(flow), "critic_s": dict(critic), "critic_t": dict(critic),
            "dal": {"hidden": 64}}


def state_dict(named):
    return {name: p.data.copy() for name, p in named}


def load_params(named, params):
    missing = [n for n, _ in named if n not in params]
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {missing[:5]}")
    for name, p in named:
        if params[name].shape != p.data.shape:
            raise ValueError(f"{name}: checkpoint shape {params[name].shape} vs model {p.data.shape}")
        p.data = params[name].astype(np.float64).copy()


def assert_disjoint(*optimizers):
    seen = set()
    for opt in optimizers:
        ids = {id(p) for p in opt.params.values()}
        if seen & ids:
            raise AssertionError("optimizers share parameters")
        seen |= ids


# --- losses --------------------------------------------------------------------

def prepare_batch(samples, rng):
    """Flow-space batch and the per-sample dequantization log-det (0 for vectors)."""
    if samples.ndim == 4:
        deq = dequantize(samples, noise=rng.uniform(0.0, 1.0, size=samples.shape))
        return Tensor(deq.values), deq.log_det
    return Tensor(samples), np.zeros(len(samples))


def nll_bits(z, log_det, correction):
    """Mean negative log-likelihood in bits per dimension."""
    d = z.shape[1]
    lp = standard_normal_log_prob(z) + log_det + Tensor(correction)
    return ops.mean(lp) * (-1.0 / (d * LN2))


def _guard(step, component, compute):
    """Evaluate one loss term; any non-finite value aborts naming the component."""
    try:
        value = compute() if callable(compute) else compute
    except NonFiniteError as exc:
        raise TrainingDiverged(step, component) from exc
    if not np.all(np.isfinite(value.data)):
        raise TrainingDiverged(step, component)
    return value


def _value(t):
    return float(t.data) if isinstance(t, Tensor) else float(t)


def draw(data, rng, n):
    return data[rng.integers(0, len(data), n)]


def align_step(models, optimizers, batch_s, batch_t, cfg, step=0):
    """One alternating update: critic/DAL step(s), then one flow step.

    ``batch_s``/``batch_t`` are ``(flow_space_tensor, dequant_log_det)`` pairs.
    Returns a dict of every component loss (zero where the weight is zero).
    """
    assert_disjoint(*optimizers.values())
    (xs, cs), (xt, ct) = batch_s, batch_t
    out = dict.fromkeys(ALIGN_COMPONENTS, 0.0)
    fs, ft, crs, crt, dal = models.flow_s, models.flow_t, models.critic_s, models.critic_t, models.dal
    try:
        if cfg.adversarial:
            for _ in range(cfg.critic_steps):
                with no_grad():
                    zs = fs.forward(xs).z
                    zt = ft.forward(xt).z
                    fake_t = ft.inverse(zs)
                    fake_s = fs.inverse(zt)
                optimizers["critics"].zero_grad()
                optimizers["dal"].zero_grad()
                l_ct = _guard(step, "critic_t", lambda: adv_critic_loss(crt, xt, fake_t))
                l_cs = _guard(step, "critic_s", lambda: adv_critic_loss(crs, xs, fake_s))
                l_dal = _guard(step, "dal_classifier", lambda: dal_loss(dal, zs, zt)[0])
                backward(l_cs + l_ct + l_dal)
                optimizers["critics"].step()
                optimizers["dal"].step()
                out.update(critic_s=_value(l_cs), critic_t=_value(l_ct), dal_classifier=_value(l_dal))

        optimizers["flows"].zero_grad()
        zs, lds = fs.forward(xs)
        zt, ldt = ft.forward(xt)
        total = None
        terms = []
        if cfg.lambda_s > 0 or cfg.lambda_t > 0:
            nll_s = _guard(step, "nll_s", lambda: nll_bits(zs, lds, cs))
            nll_t = _guard(step, "nll_t", lambda: nll_bits(zt, ldt, ct))
            out.update(nll_s=_value(nll_s), nll_t=_value(nll_t))
            if cfg.lambda_s > 0:
                terms.append(nll_s * cfg.lambda_s)
            if cfg.lambda_t > 0:
                terms.append(nll_t * cfg.lambda_t)
        if cfg.adv_weight > 0:
            g_s2t = _guard(step, "gen_s2t", lambda: adv_generator_loss(crt, ft.inverse(zs)))
            g_t2s = _guard(step, "gen_t2s", lambda: adv_generator_loss(crs, fs.inverse(zt)))
            out.update(gen_s2t=_value(g_s2t), gen_t2s=_value(g_t2s))
            terms.append((g_s2t + g_t2s) * cfg.adv_weight)
        if cfg.gamma_s > 0:
            c_s = _guard(step, "confusion_s", lambda: domain_confusion(dal, zs))
            out["confusion_s"] = _value(c_s)
            terms.append(c_s * cfg.gamma_s)
        if cfg.gamma_t > 0:
            c_t = _guard(step, "confusion_t", lambda: domain_confusion(dal, zt))
            out["confusion_t"] = _value(c_t)
            terms.append(c_t * cfg.gamma_t)
        for t in terms:
            total = t if total is None else total + t
    except TrainingDiverged:
        raise
    except NonFiniteError as exc:
        raise TrainingDiverged(step, str(exc)) from exc
    if total is not None:
        out["flow_total"] = _value(_guard(step, "flow_total", total))
        backward(total)
        optimizers["flows"].step()
    return out


# --- metrics -----------------------------------------------------------------------

class MetricsLog:
    """Append-only metrics CSV plus a wall-time sidecar.

    Wall time lives in a separate file so the metrics file itself is a pure
    function of config and seed.
    """

    def __init__(self, path, columns, resume=False):
        self.path = Path(path)
        self.timing = self.path.with_name(self.path.stem + "_timing.csv")
        self.columns = list(columns)
        if not resume or not self.path.exists():
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(["step"] + self.columns)
            with open(self.timing, "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerow(["step", "wall_time"])
        self.t0 = time.perf_counter()

    def row(self, step, values):
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([step] + [repr(float(values[c])) for c in self.columns])
        with open(self.timing, "a", newline="") as fh:
            csv.writer(fh, lineterminator="\n").writerow([step, f"{time.perf_counter() - self.t0:.3f}"])


def read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: float(v) for k, v in r.items()} for r in rows]


# --- Phase 1 ---------------------------------------------------------------------------

def align_optimizers(models, lr):
    return {
        "flows": Adam(models.named_parameters("flow_s", "flow_t"), lr),
        "critics": Adam(models.named_parameters("critic_s", "critic_t"), lr),
        "dal": Adam(models.named_parameters("dal"), lr),
    }


def _align_checkpoint(models, optimizers, rngs, cfg, step, extra):
    config = {"phase": PHASE_ALIGN, "align": asdict(cfg), "models": models.cfg}
    config.update(extra)
    return Checkpoint(PHASE_ALIGN, step, state_dict(models.named_parameters()), config,
                      {"batch_s": rng_state(rngs[STREAM_BATCH_S]), "batch_t": rng_state(rngs[STREAM_BATCH_T])},
                      {k: o.state.copy() for k, o in optimizers.items()})


def restore_alignment(ckpt):
    """Rebuild models from an alignment (or conditional) checkpoint."""
    cfg = ckpt.config
    align = config_from_dict(AlignConfig, cfg["align"])
    models = AlignModels(cfg["models"], streams(align.seed))
    load_params(models.named_parameters(), ckpt.params)
    return models


def train_alignment(data_s, data_t, cfg, model_cfg, out_dir=None, resume=None, extra_config=None, on_log=None):
    """Phase 1: loop ``align_step`` for ``cfg.steps`` steps.

    ``data_s``/``data_t`` are :class:`Dataset` objects; target labels are
    refused.  With ``out_dir`` set, writes ``metrics.csv`` (one row per
    ``log_every`` steps), periodic ``align_<step>.ckpt`` files and the final
    ``align.ckpt``.  ``resume`` continues from a checkpoint of the same run.
    """
    require_unlabeled_target(data_t)
    extra = dict(extra_config or {})
    rngs = streams(cfg.seed)
    models = AlignModels(model_cfg, rngs)
    optimizers = align_optimizers(models, cfg.lr)
    start = 0
    if resume is not None:
        if resume.phase != PHASE_ALIGN:
            raise ValueError(f"cannot resume alignment from a {resume.phase!r} checkpoint")
        load_params(models.named_parameters(), resume.params)
        for k, o in optimizers.items():
            o.state = resume.optimizers[k].copy()
        set_rng_state(rngs[STREAM_BATCH_S], resume.rng["batch_s"])
        set_rng_state(rngs[STREAM_BATCH_T], resume.rng["batch_t"])
        start = resume.step
    log = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log = MetricsLog(out_dir / "metrics.csv", ALIGN_COMPONENTS, resume=resume is not None)
    xs_all = np.asarray(data_s.samples, dtype=np.float64)
    xt_all = np.asarray(data_t.samples, dtype=np.float64)
    for step in range(start, cfg.steps):
        rs, rt = rngs[STREAM_BATCH_S], rngs[STREAM_BATCH_T]
        bs = prepare_batch(draw(xs_all, rs, cfg.batch_size), rs)
        bt = prepare_batch(draw(xt_all, rt, cfg.batch_size), rt)
        losses = align_step(models, optimizers, bs, bt, cfg, step)
        done = step + 1
        if cfg.log_every and (step % cfg.log_every == 0 or done == cfg.steps):
            if log is not None:
                log.row(step, losses)
            if on_log is not None:
                on_log(step, losses, models)
        if out_dir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.steps:
            save_checkpoint(out_dir / f"align_{done}.ckpt", _align_checkpoint(models, optimizers, rngs, cfg, done, extra))
    ckpt = _align_checkpoint(models, optimizers, rngs, cfg, max(start, cfg.steps), extra)
    if out_dir is not None:
        save_checkpoint(out_dir / "align.ckpt", ckpt)
    return ckpt, models


def train_mle(data, flow_cfg, cfg, domain="s"):
    """Reference single-flow maximum-likelihood run.

    Uses the same seed streams as the matching flow inside
    :func:`train_alignment`, so with all adversarial weights zero the two
    produce identical parameter trajectories.  Returns (flow, nll history).
    """
    rngs = streams(cfg.seed)
    init, batch = ((STREAM_INIT_S, STREAM_BATCH_S) if domain == "s" else (STREAM_INIT_T, STREAM_BATCH_T))
    weight = cfg.lambda_s if domain == "s" else cfg.lambda_t
    flow = build_flow(flow_cfg, rngs[init])
    prefix = "flow_s." if domain == "s" else "flow_t."
    opt = Adam([(prefix + n, p) for n, p in flow.named_parameters()], cfg.lr)
    samples = np.asarray(data.samples, dtype=np.float64)
    history = []
    for step in range(cfg.steps):
        x, corr = prepare_batch(draw(samples, rngs[batch], cfg.batch_size), rngs[batch])
        opt.zero_grad()
        z, ld = flow.forward(x)
        nll = _guard(step, f"nll_{domain}", lambda: nll_bits(z, ld, corr))
        history.append(_value(nll))
        if weight > 0:
            backward(nll * weight)
            opt.step()
    return flow, history


# --- Phase 2 --------------------------------------------------------------------

class CondModels:
    def __init__(self, model_cfg, seed):
        rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
        self.cfg = model_cfg
        self.encoder = build_encoder(model_cfg["encoder"], rng)
        self.critic = build_latent_critic(model_cfg["latent_critic"], rng)

    def named_parameters(self, *names):
        groups = {"encoder": self.encoder, "latent_critic": self.critic}
        names = names or tuple(groups)
        out = []
        for g in names:
            out.extend((f"{g}.{n}", p) for n, p in groups[g].named_parameters())
        return out


def default_cond_models(latent_dim, n_classes, noise_dim=None, hidden=64):
    noise_dim = noise_dim or 8
    return {"encoder": {"kind": "vector", "n_classes": n_classes, "noise_dim": noise_dim,
                        "latent_dim": latent_dim, "hidden": hidden},
            "latent_critic": {"kind": "vector", "latent_dim": latent_dim, "n_classes": n_classes,
                              "hidden": hidden}}


def cond_step(cond, optimizers, real_z, real_labels, fake_labels, eps, cfg, step=0):
    """Critic/classifier update on detached fakes, then one encoder update."""
    assert_disjoint(*optimizers.values())
    k = cond.encoder.n_classes
    c = one_hot(fake_labels, k)
    try:
        with no_grad():
            fake = condsynth.encode(cond.encoder, c, Tensor(eps))
        optimizers["latent_critic"].zero_grad()
        total_c, l_cr, l_cl = condsynth.critic_objective(cfg, cond.critic, fake, real_z, fake_labels, real_labels)
        _guard(step, "critic_total", total_c)
        backward(total_c)
        optimizers["latent_critic"].step()

        optimizers["encoder"].zero_grad()
        fake = condsynth.encode(cond.encoder, c, Tensor(eps))
        total_e, l_e, ce = condsynth.encoder_objective(cfg, cond.critic, fake, fake_labels)
        _guard(step, "encoder_total", total_e)
    except TrainingDiverged:
        raise
    except NonFiniteError as exc:
        raise TrainingDiverged(step, str(exc)) from exc
    backward(total_e)
    optimizers["encoder"].step()
    return {"latent_critic": _value(l_cr), "classifier": _value(l_cl), "critic_total": _value(total_c),
            "encoder": _value(l_e), "encoder_class": _value(ce), "encoder_total": _value(total_e)}


def _cond_checkpoint(align_ckpt, models, cond, optimizers, rng, cfg, step, extra):
    params = dict(align_ckpt.params)
    params.update(state_dict(cond.named_parameters()))
    config = dict(align_ckpt.config)
    config.update({"phase": PHASE_COND, "cond": asdict(cfg), "cond_models": cond.cfg})
    config.update(extra)
    return Checkpoint(PHASE_COND, step, params, config, {"cond": rng_state(rng)},
                      {k: o.state.copy() for k, o in optimizers.items()})


def restore_conditional(ckpt):
    if ckpt.phase != PHASE_COND:
        raise ValueError(f"expected a {PHASE_COND!r} checkpoint, got {ckpt.phase!r}")
    models = restore_alignment(ckpt)
    cfg = config_from_dict(CondConfig, ckpt.config["cond"])
    cond = CondModels(ckpt.config["cond_models"], cfg.seed)
    load_params(cond.named_parameters(), ckpt.params)
    return models, cond


def train_conditional(align_ckpt, labeled_source, cfg, cond_model_cfg=None, target=None, out_dir=None,
                      resume=None, extra_config=None, on_log=None):
    """Phase 2: latent auxiliary-classifier GAN on frozen alignment flows.

    Real latents are ``F_s(x_s)`` with their source labels; the target domain
    contributes no labels (passing a labeled ``target`` is an error).
    """
    if target is not None:
        if target.labels is not None:
            raise LabelAccessError("train_conditional must not see target labels")
        require_unlabeled_target(target)
    if labeled_source.labels is None:
        raise ValueError("conditional training needs labeled source data")
    if labeled_source.domain_tag == TARGET:
        raise LabelAccessError("conditional training uses source-domain labels only")
    if align_ckpt.phase != PHASE_ALIGN:
        raise ValueError(f"expected an alignment checkpoint, got {align_ckpt.phase!r}")
    models = restore_alignment(align_ckpt)
    k = labeled_source.n_classes or int(np.max(labeled_source.labels)) + 1
    if cond_model_cfg is None:
        cond_model_cfg = default_cond_models(models.flow_s.latent_dim, k)
    cond = CondModels(cond_model_cfg, cfg.seed)
    optimizers = {"encoder": Adam(cond.named_parameters("encoder"), cfg.lr),
                  "latent_critic": Adam(cond.named_parameters("latent_critic"), cfg.lr)}
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(2)[1])
    start = 0
    if resume is not None:
        load_params(cond.named_parameters(), resume.params)
        for name, o in optimizers.items():
            o.state = resume.optimizers[name].copy()
        set_rng_state(rng, resume.rng["cond"])
        start = resume.step
    frozen = state_dict(models.named_parameters("flow_s", "flow_t"))

    samples = np.asarray(labeled_source.samples, dtype=np.float64)
    labels = np.asarray(labeled_source.labels, dtype=int)
    log = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log = MetricsLog(out_dir / "cond_metrics.csv", COND_COMPONENTS, resume=resume is not None)
    extra = dict(extra_config or {})
    for step in range(start, cfg.steps):
        idx = rng.integers(0, len(samples), cfg.batch_size)
        x, _ = prepare_batch(samples[idx], rng)
        with no_grad():
            real_z = models.flow_s.forward(x).z.detach()
        fake_labels = rng.integers(0, k, cfg.batch_size)
        eps = rng.standard_normal((cfg.batch_size, cond.encoder.noise_dim))
        losses = cond_step(cond, optimizers, real_z, labels[idx], fake_labels, eps, cfg, step)
        done = step + 1
        if cfg.log_every and (step % cfg.log_every == 0 or done == cfg.steps):
            if log is not None:
                log.row(step, losses)
            if on_log is not None:
                on_log(step, losses, cond)
        if out_dir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0 and done < cfg.steps:
            save_checkpoint(out_dir / f"cond_{done}.ckpt",
                            _cond_checkpoint(align_ckpt, models, cond, optimizers, rng, cfg, done, extra))
    for name, p in models.named_parameters("flow_s", "flow_t"):
        if not np.array_equal(p.data, frozen[name]):
            raise AssertionError(f"frozen flow parameter {name} changed during conditional training")
    ckpt = _cond_checkpoint(align_ckpt, models, cond, optimizers, rng, cfg, max(start, cfg.steps), extra)
    if out_dir is not None:
        save_checkpoint(out_dir / "cond.ckpt", ckpt)
    return ckpt, models, cond
