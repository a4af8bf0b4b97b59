import math

import numpy as np
import pytest

from cdcgen.adversary import (
    LOGIT_CLAMP,
    DomainClassifier,
    PatchCritic,
    VectorCritic,
    adv_critic_loss,
    adv_generator_loss,
    build_critic,
    dal_loss,
    domain_confusion,
)
from cdcgen.diffmath import Tensor, backward, check_parameters, no_grad, ops
from cdcgen.flow import VectorFlow, translate
from cdcgen.trainer.optim import Adam
from conftest import perturb


def _silence(net):
    # zero the output layer: every logit is exactly 0, every probability 0.5
    last = net.net.layers[-1]
    last.weight.data[...] = 0.0
    last.bias.data[...] = 0.0
    return net


def _pts(seed, n=16, d=2):
    return Tensor(np.random.default_rng(seed).standard_normal((n, d)))


def test_uninformed_critic_loss():
    critic = _silence(VectorCritic(2, np.random.default_rng(0)))
    assert abs(adv_critic_loss(critic, _pts(1), _pts(2)).item() - 2 * math.log(2)) < 1e-12
    assert round(adv_critic_loss(critic, _pts(1), _pts(2)).item(), 4) == 1.3863


def test_perfect_critic_loss_hits_clamp_floor():
    critic = VectorCritic(1, np.random.default_rng(0))
    # single linear layer, logit = 1000 x, clamped to +-15: real at x > 0, fake at x < 0
    critic.net = type(critic.net)([1, 1], np.random.default_rng(0))
    critic.net.layers[0].weight.data[...] = 1000.0
    real, fake = Tensor(np.ones((4, 1))), Tensor(-np.ones((4, 1)))
    floor = 2 * math.log1p(math.exp(-LOGIT_CLAMP))
    assert abs(adv_critic_loss(critic, real, fake).item() - floor) < 1e-12
    assert adv_critic_loss(critic, real, fake).item() < 1e-6


def test_generator_loss_values():
    critic = _silence(VectorCritic(2, np.random.default_rng(0)))
    assert abs(adv_generator_loss(critic, _pts(3)).item() - math.log(2)) < 1e-12
    critic.net.layers[-1].bias.data[...] = 1e3  # fully fooled
    assert adv_generator_loss(critic, _pts(3)).item() < 1e-6


def test_critic_output_stays_inside_unit_interval_for_extreme_inputs():
    rng = np.random.default_rng(4)
    critic = VectorCritic(2, rng)
    x = Tensor(np.array([[1e3, 1e3], [-1e3, -1e3], [1e3, -1e3], [0.0, 0.0]]))
    with no_grad():
        p = critic(x).data
    assert np.all((p > 0) & (p < 1))
    assert np.isfinite(adv_critic_loss(critic, x, x).item())
    clf = DomainClassifier(2, rng)
    post = clf.posterior(x)
    assert np.all(np.isfinite(post))
    assert np.allclose(post.sum(axis=1), 1.0, atol=1e-9)


def test_patch_critic_shape_and_range():
    critic = PatchCritic(1, np.random.default_rng(0), base=16, depth=3)
    assert critic.conv0.weight.shape[0] == 16
    x = Tensor(np.random.default_rng(1).standard_normal((3, 1, 16, 16)) * 1e3)
    with no_grad():
        p = critic(x).data
    assert p.shape == (3,) and np.all((p > 0) & (p < 1))


def test_uniform_classifier_dal_losses():
    clf = _silence(DomainClassifier(2, np.random.default_rng(0)))
    cls, conf = dal_loss(clf, _pts(5), _pts(6, n=7))
    assert abs(cls.item() - math.log(2)) < 1e-12
    assert abs(conf.item() - math.log(2)) < 1e-12


def test_perfect_classifier_dal_loss():
    clf = DomainClassifier(1, np.random.default_rng(0))
    clf.net = type(clf.net)([1, 2], np.random.default_rng(0))
    clf.net.layers[0].weight.data[...] = [[-50.0, 50.0]]
    cls, _ = dal_loss(clf, Tensor(-np.ones((5, 1))), Tensor(np.ones((5, 1))))
    assert cls.item() < 1e-12


def test_dal_matches_fused_cross_entropy():
    rng = np.random.default_rng(7)
    clf = DomainClassifier(2, rng)
    zs, zt = _pts(8, 5), _pts(9, 6)
    logits = np.concatenate([clf.logits(zs).data, clf.logits(zt).data])
    tags = np.r_[np.zeros(5, int), np.ones(6, int)]
    cls, conf = dal_loss(clf, zs, zt)
    assert cls.item() == ops.softmax_cross_entropy(Tensor(logits), tags).item()
    assert conf.item() == ops.softmax_cross_entropy(Tensor(logits), np.full((11, 2), 0.5)).item()
    assert abs(domain_confusion(clf, zs).item() - ops.softmax_cross_entropy(Tensor(logits[:5]), np.full((5, 2), 0.5)).item()) < 1e-15


def test_dal_rejects_empty_batch():
    clf = DomainClassifier(2, np.random.default_rng(0))
    with pytest.raises(ValueError):
        dal_loss(clf, Tensor(np.zeros((0, 2))), _pts(1))


def test_critic_gradient_check():
    rng = np.random.default_rng(10)
    critic = VectorCritic(2, rng, hidden=8)
    real, fake = _pts(11, 6), _pts(12, 6)
    err = check_parameters(lambda: adv_critic_loss(critic, real, fake), critic.parameters())
    assert err < 1e-5


def test_patch_critic_gradient_check():
    rng = np.random.default_rng(13)
    critic = PatchCritic(1, rng, base=2, depth=2)
    real = Tensor(rng.standard_normal((2, 1, 8, 8)))
    fake = Tensor(rng.standard_normal((2, 1, 8, 8)))
    err = check_parameters(lambda: adv_critic_loss(critic, real, fake), critic.parameters(), max_coords=3, rng=rng)
    assert err < 1e-5


def test_dal_gradient_check():
    rng = np.random.default_rng(14)
    clf = DomainClassifier(2, rng, hidden=8)
    zs, zt = _pts(15, 5), _pts(16, 5)
    assert check_parameters(lambda: dal_loss(clf, zs, zt)[0], clf.parameters()) < 1e-5
    assert check_parameters(lambda: dal_loss(clf, zs, zt)[1], clf.parameters()) < 1e-5


def test_generator_gradient_reaches_both_flows():
    rng = np.random.default_rng(17)
    fs = perturb(VectorFlow(2, 2, 8, rng), rng)
    ft = perturb(VectorFlow(2, 2, 8, rng), rng)
    critic = VectorCritic(2, rng)
    loss = adv_generator_loss(critic, translate(ft, fs, _pts(18)))
    backward(loss)
    for flow in (fs, ft):
        assert any(p.grad is not None and np.abs(p.grad).sum() > 0 for p in flow.parameters())
    assert all(p.grad is not None for p in critic.parameters())


@pytest.mark.parametrize("which", ["critic", "classifier", "generator"])
def test_single_step_descent(which):
    rng = np.random.default_rng(19)
    real, fake = _pts(20, 32) + 1.0, _pts(21, 32)
    if which == "critic":
        net = VectorCritic(2, rng)
        loss_fn = lambda: adv_critic_loss(net, real, fake)
    elif which == "classifier":
        net = DomainClassifier(2, rng)
        loss_fn = lambda: dal_loss(net, real, fake)[0]
    else:
        net = perturb(VectorFlow(2, 2, 16, rng), rng, 0.1)
        critic = VectorCritic(2, np.random.default_rng(22))
        loss_fn = lambda: adv_generator_loss(critic, net.inverse(fake))
    opt = Adam(net.named_parameters(), 1e-3)
    before = loss_fn()
    backward(before)
    opt.step()
    with no_grad():
        after = loss_fn()
    assert after.item() < before.item()


def test_build_critic_kinds():
    rng = np.random.default_rng(0)
    assert isinstance(build_critic({"kind": "vector", "dim": 2}, rng), VectorCritic)
    assert isinstance(build_critic({"kind": "patch", "channels": 1, "base": 4, "depth": 2}, rng), PatchCritic)
    with pytest.raises(ValueError):
        build_critic({"kind": "wgan"}, rng)
