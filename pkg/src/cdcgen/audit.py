"""Registry of finite-difference gradient checks for every primitive and loss."""

import time
from dataclasses import dataclass

import numpy as np

from cdcgen import adversary, condsynth
from cdcgen.diffmath import Tensor, check_parameters, grad_check, ops
from cdcgen.flow import ImageFlow, VectorFlow, log_prob
from cdcgen.trainer.loops import nll_bits

PRIMITIVE_TOL = 1e-6
COMPOSITE_TOL = 1e-5


@dataclass
class AuditResult:
    name: str
    kind: str
    seeds: int
    max_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self):
        return self.max_error < self.tolerance


def _away(rng, shape, margin=0.1):
    """Values bounded away from zero, for ops with a kink at the origin."""
    return rng.choice([-1.0, 1.0], size=shape) * (margin + rng.uniform(0, 1.5, size=shape))


def _weights(rng, shape):
    return Tensor(rng.standard_normal(shape))


def _perturb(module, rng, scale=0.3):
    for p in module.parameters():
        if p.requires_grad:
            p.data = p.data + scale * rng.standard_normal(p.data.shape)
    return module


# each primitive case: rng -> (function of one tensor returning a scalar, point)
def _p_add(r):
    b = _weights(r, (3, 4))
    return lambda x: ops.sum(ops.mul(ops.add(x, b), b)), r.standard_normal((3, 4))


def _p_add_broadcast(r):
    b = _weights(r, (3, 4))
    return lambda x: ops.sum(ops.mul(ops.add(b, x), b)), r.standard_normal((4,))


def _p_sub(r):
    b = _weights(r, (3, 4))
    return lambda x: ops.sum(ops.mul(ops.sub(b, x), b)), r.standard_normal((3, 4))


def _p_mul(r):
    b = _weights(r, (3, 1))
    return lambda x: ops.sum(ops.mul(ops.mul(x, b), x)), r.standard_normal((3, 4))


def _p_div(r):
    b = _weights(r, (3, 4))
    return lambda x: ops.sum(ops.div(b, x)) + ops.sum(ops.div(x, ops.add(ops.square(b), 1.0))), _away(r, (3, 4), 0.5)


def _p_neg(r):
    b = _weights(r, (5,))
    return lambda x: ops.sum(ops.mul(ops.neg(x), b)), r.standard_normal(5)


def _p_square(r):
    b = _weights(r, (5,))
    return lambda x: ops.sum(ops.mul(ops.square(x), b)), r.standard_normal(5)


def _p_matmul_left(r):
    w = _weights(r, (4, 3))
    c = _weights(r, (2, 3))
    return lambda x: ops.sum(ops.mul(ops.matmul(x, w), c)), r.standard_normal((2, 4))


def _p_matmul_right(r):
    a = _weights(r, (2, 4))
    c = _weights(r, (2, 3))
    return lambda w: ops.sum(ops.mul(ops.matmul(a, w), c)), r.standard_normal((4, 3))


def _p_exp(r):
    b = _weights(r, (6,))
    return lambda x: ops.sum(ops.mul(ops.exp(x), b)), r.uniform(-2, 2, 6)


def _p_log(r):
    b = _weights(r, (6,))
    return lambda x: ops.sum(ops.mul(ops.log(x), b)), r.uniform(0.2, 3.0, 6)


def _p_tanh(r):
    b = _weights(r, (6,))
    return lambda x: ops.sum(ops.mul(ops.tanh(x), b)), r.standard_normal(6) * 2


def _p_sigmoid(r):
    b = _weights(r, (6,))
    return lambda x: ops.sum(ops.mul(ops.sigmoid(x), b)), r.standard_normal(6) * 3


def _p_leaky_relu(r):
    b = _weights(r, (8,))
    return lambda x: ops.sum(ops.mul(ops.leaky_relu(x), b)), _away(r, (8,))


def _p_clip(r):
    b = _weights(r, (8,))
    x = r.uniform(-2, 2, 8)
    x = np.where(np.abs(np.abs(x) - 1.0) < 0.1, x + 0.3, x)
    return lambda t: ops.sum(ops.mul(ops.clip(t, -1.0, 1.0), b)), x


def _p_sum_axis(r):
    b = _weights(r, (3, 1, 5))
    return lambda x: ops.sum(ops.mul(ops.sum(x, axis=1, keepdims=True), b)), r.standard_normal((3, 4, 5))


def _p_mean_axis(r):
    b = _weights(r, (3, 5))
    return lambda x: ops.sum(ops.mul(ops.mean(x, axis=1), b)), r.standard_normal((3, 4, 5))


def _p_reshape(r):
    b = _weights(r, (6, 2))
    return lambda x: ops.sum(ops.mul(ops.reshape(x, (6, 2)), b)), r.standard_normal((3, 4))


def _p_transpose(r):
    b = _weights(r, (4, 2, 3))
    return lambda x: ops.sum(ops.mul(ops.transpose(x, (2, 0, 1)), b)), r.standard_normal((2, 3, 4))


def _p_concat(r):
    other = _weights(r, (3, 2))
    b = _weights(r, (3, 6))
    return lambda x: ops.sum(ops.mul(ops.concat([x, other, x], axis=1), b)), r.standard_normal((3, 2))


def _p_getitem(r):
    b = _weights(r, (3, 2))
    idx = np.array([0, 2, 2])
    return lambda x: ops.sum(ops.mul(x[idx, 1:3], b)) + ops.sum(ops.square(x[:, 0])), r.standard_normal((3, 4))


def _p_masked_select(r):
    mask = np.array([True, False, True, True, False])
    b = _weights(r, (2, 3))
    return lambda x: ops.sum(ops.mul(ops.masked_select(x, mask), b)), r.standard_normal((2, 5))


def _p_channel_affine(r):
    s = _weights(r, (3,))
    t = _weights(r, (3,))
    b = _weights(r, (2, 3, 2, 2))
    return lambda x: ops.sum(ops.mul(ops.channel_affine(x, s, t), b)), r.standard_normal((2, 3, 2, 2))


def _p_channel_affine_scale(r):
    x = _weights(r, (2, 3, 2, 2))
    t = _weights(r, (3,))
    b = _weights(r, (2, 3, 2, 2))
    return lambda s: ops.sum(ops.mul(ops.channel_affine(x, s, t), b)), r.standard_normal(3) * 0.5


def _p_cross_entropy(r):
    labels = r.integers(0, 4, 5)
    return lambda x: ops.softmax_cross_entropy(x, labels), r.standard_normal((5, 4)) * 2


def _p_soft_cross_entropy(r):
    target = r.dirichlet(np.ones(3), 4)
    return lambda x: ops.softmax_cross_entropy(x, target), r.standard_normal((4, 3)) * 2


def _p_conv2d(r):
    w = _weights(r, (3, 2, 3, 3))
    bias = _weights(r, (3,))
    c = _weights(r, (2, 3, 3, 3))
    return lambda x: ops.sum(ops.mul(ops.conv2d(x, w, bias, stride=2, padding=1), c)), r.standard_normal((2, 2, 5, 5))


def _p_conv2d_weight(r):
    x = _weights(r, (2, 2, 4, 4))
    c = _weights(r, (2, 3, 4, 4))
    return lambda w: ops.sum(ops.mul(ops.conv2d(x, w, None, stride=1, padding=1), c)), r.standard_normal((3, 2, 3, 3))


def _p_conv_transpose2d(r):
    w = _weights(r, (2, 3, 4, 4))
    c = _weights(r, (2, 3, 6, 6))
    return (lambda x: ops.sum(ops.mul(ops.conv_transpose2d(x, w, None, stride=2, padding=1), c)),
            r.standard_normal((2, 2, 3, 3)))


def _p_conv_transpose2d_weight(r):
    x = _weights(r, (2, 2, 3, 3))
    bias = _weights(r, (3,))
    c = _weights(r, (2, 3, 6, 6))
    return (lambda w: ops.sum(ops.mul(ops.conv_transpose2d(x, w, bias, stride=2, padding=1), c)),
            r.standard_normal((2, 3, 4, 4)))


def _p_squeeze(r):
    c = _weights(r, (2, 4, 2, 2))
    return lambda x: ops.sum(ops.mul(ops.squeeze2x2(x), c)), r.standard_normal((2, 1, 4, 4))


def _p_unsqueeze(r):
    c = _weights(r, (2, 1, 4, 4))
    return lambda x: ops.sum(ops.mul(ops.unsqueeze2x2(x), c)), r.standard_normal((2, 4, 2, 2))


PRIMITIVES = {
    "add": _p_add, "add_broadcast": _p_add_broadcast, "sub": _p_sub, "mul": _p_mul, "div": _p_div,
    "neg": _p_neg, "square": _p_square, "matmul_left": _p_matmul_left, "matmul_right": _p_matmul_right,
    "exp": _p_exp, "log": _p_log, "tanh": _p_tanh, "sigmoid": _p_sigmoid, "leaky_relu": _p_leaky_relu,
    "clip": _p_clip, "sum": _p_sum_axis, "mean": _p_mean_axis, "reshape": _p_reshape,
    "transpose": _p_transpose, "concat": _p_concat, "getitem": _p_getitem, "masked_select": _p_masked_select,
    "channel_affine": _p_channel_affine, "channel_affine_scale": _p_channel_affine_scale,
    "softmax_cross_entropy": _p_cross_entropy, "soft_cross_entropy": _p_soft_cross_entropy,
    "conv2d": _p_conv2d, "conv2d_weight": _p_conv2d_weight, "conv_transpose2d": _p_conv_transpose2d,
    "conv_transpose2d_weight": _p_conv_transpose2d_weight, "squeeze2x2": _p_squeeze,
    "unsqueeze2x2": _p_unsqueeze,
}


# composite cases: rng -> list of (function, point) and (loss_fn, params) checks
def _small_flow(r, dim=2):
    return _perturb(VectorFlow(dim, 4, 8, r), r, 0.3)


def _c_flow_nll(r):
    flow = _small_flow(r)
    x = r.standard_normal((4, 2))
    fn = lambda t: ops.mean(log_prob(flow, t))  # noqa: E731
    loss = lambda: nll_bits(*flow.forward(Tensor(x)), np.zeros(4))  # noqa: E731
    return [("input", fn, x)], [("params", loss, flow.parameters())]


def _c_image_flow_nll(r):
    flow = _perturb(ImageFlow((1, 4, 4), 2, 2, 1, r), r, 0.05)
    x = r.standard_normal((1, 1, 4, 4))
    fn = lambda t: ops.mean(log_prob(flow, t))  # noqa: E731
    return [("input", fn, x)], []


def _c_translation_gen(r):
    fs, ft = _small_flow(r), _small_flow(r)
    critic = _perturb(adversary.VectorCritic(2, r, 8), r, 0.1)
    x = r.standard_normal((4, 2))
    fn = lambda t: adversary.adv_generator_loss(critic, ft.inverse(fs.forward(t).z))  # noqa: E731
    loss = lambda: adversary.adv_generator_loss(critic, ft.inverse(fs.forward(Tensor(x)).z))  # noqa: E731
    return [("input", fn, x)], [("flows", loss, fs.parameters() + ft.parameters())]


def _c_critic(r):
    critic = _perturb(adversary.VectorCritic(2, r, 8), r, 0.1)
    real, fake = r.standard_normal((4, 2)), r.standard_normal((4, 2))
    fn = lambda t: adversary.adv_critic_loss(critic, t, Tensor(fake))  # noqa: E731
    loss = lambda: adversary.adv_critic_loss(critic, Tensor(real), Tensor(fake))  # noqa: E731
    return [("real", fn, real)], [("critic", loss, critic.parameters())]


def _c_dal(r):
    clf = _perturb(adversary.DomainClassifier(2, r, 8), r, 0.1)
    zs, zt = r.standard_normal((4, 2)), r.standard_normal((4, 2))
    conf = lambda t: adversary.domain_confusion(clf, t)  # noqa: E731
    cls = lambda t: adversary.dal_loss(clf, t, Tensor(zt))[0]  # noqa: E731
    loss = lambda: adversary.dal_loss(clf, Tensor(zs), Tensor(zt))[0]  # noqa: E731
    return [("confusion", conf, zs), ("classifier_input", cls, zs)], [("classifier", loss, clf.parameters())]


def _cond_models(r):
    enc = _perturb(condsynth.VectorEncoder(3, 2, 2, r, 8), r, 0.1)
    critic = _perturb(condsynth.VectorLatentCritic(2, 3, r, 8), r, 0.1)
    return enc, critic


def _c_conditional(r):
    enc, critic = _cond_models(r)
    cfg = condsynth.CondConfig(beta_e=r.uniform(0.5, 2), beta_cr=r.uniform(0.5, 2), beta_cl=r.uniform(0.5, 2))
    labels = r.integers(0, 3, 4)
    c = condsynth.one_hot(labels, 3)
    eps = r.standard_normal((4, 2))
    real = r.standard_normal((4, 2))
    real_labels = r.integers(0, 3, 4)
    fn_e = lambda t: condsynth.encoder_loss(critic, t)  # noqa: E731
    fn_cr = lambda t: condsynth.latent_critic_loss(critic, Tensor(eps), t)  # noqa: E731
    fn_cl = lambda t: condsynth.classifier_loss(critic, t, Tensor(real), labels, real_labels)  # noqa: E731
    enc_loss = lambda: condsynth.encoder_objective(cfg, critic, condsynth.encode(enc, c, Tensor(eps)), labels)[0]  # noqa: E731
    crit_loss = lambda: condsynth.critic_objective(cfg, critic, Tensor(eps), Tensor(real), labels, real_labels)[0]  # noqa: E731
    return ([("encoder_loss", fn_e, eps), ("latent_critic_loss", fn_cr, real), ("classifier_loss", fn_cl, eps)],
            [("encoder_objective", enc_loss, enc.parameters()), ("critic_objective", crit_loss, critic.parameters())])


COMPOSITES = {
    "flow_nll": _c_flow_nll, "image_flow_nll": _c_image_flow_nll, "translation_generator": _c_translation_gen,
    "adv_critic": _c_critic, "dal": _c_dal, "conditional": _c_conditional,
}


def run_case(name, kind, seeds, step=1e-5, max_coords=1):
    builder = PRIMITIVES[name] if kind == "primitive" else COMPOSITES[name]
    tol = PRIMITIVE_TOL if kind == "primitive" else COMPOSITE_TOL
    worst = 0.0
    t0 = time.perf_counter()
    for seed in seeds:
        rng = np.random.default_rng(seed)
        if kind == "primitive":
            fn, point = builder(rng)
            worst = max(worst, grad_check(fn, point, step))
            continue
        input_checks, param_checks = builder(rng)
        for _, fn, point in input_checks:
            worst = max(worst, grad_check(fn, point, step))
        for _, loss, params in param_checks:
            worst = max(worst, check_parameters(loss, params, step, max_coords, rng))
    return AuditResult(name, kind, len(seeds), worst, tol, time.perf_counter() - t0)


def run_audit(n_seeds=100, primitives=True, composites=True, composite_seeds=None):
    seeds = list(range(n_seeds))
    out = []
    if primitives:
        out += [run_case(n, "primitive", seeds) for n in PRIMITIVES]
    if composites:
        cs = list(range(composite_seeds if composite_seeds is not None else n_seeds))
        out += [run_case(n, "composite", cs) for n in COMPOSITES]
    return out


def format_results(results):
    lines = [f"{'check':28s} {'kind':10s} {'seeds':>5s} {'max_rel_err':>12s} {'tol':>8s}  status"]
    for r in results:
        lines.append(f"{r.name:28s} {r.kind:10s} {r.seeds:5d} {r.max_error:12.3e} {r.tolerance:8.0e}  "
                     f"{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
