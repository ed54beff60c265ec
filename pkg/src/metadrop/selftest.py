"""A quick in-process invariant suite for ``metadrop selftest``."""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import autodiff as ad
from .baselines import RegularizerConfig, gaussian_kl
from .eval import AttackConfig, boundary_project, perturbation_norm, pgd_attack
from .metalearn import EpisodeBatch, Learner, MetaConfig, MetaParams, inner_adapt, meta_gradients, meta_objective
from .nn import dense_network, forward, init_params
from .noise import ConstantSource, NoiseConfig, NoiseGenerator
from .tasks import synthetic2d


def rel_err(a, b, floor: float = 1e-8) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def check_scalar_derivatives():
    x = ad.tensor(3.0)
    g = ad.grad(ad.mul(x, x), x, create_graph=True)
    gg = ad.grad(g, x)
    assert g.item() == 6.0 and gg.item() == 2.0
    y = ad.tensor(0.0)
    assert ad.grad(ad.softplus(y), y).item() == 0.5


def check_closed_forms():
    assert abs(ad.softplus(ad.constant(0.0)).item() - math.log(2)) < 1e-15
    ce = ad.softmax_cross_entropy(ad.constant(np.zeros((1, 3))), np.array([1]))
    assert abs(ce.item() - math.log(3)) < 1e-15
    kl = gaussian_kl(ad.constant(np.array([0.0])), ad.constant(np.array([2.0]))).item()
    assert abs(kl - (1.5 - math.log(2))) < 1e-12


def check_quadratic_maml():
    theta = ad.tensor(1.0)
    alpha, t_tr, t_te = 0.1, 0.0, 2.0
    d = ad.sub(theta, t_tr)
    g = ad.grad(ad.mul(d, d), theta, create_graph=True)
    star = ad.sub(theta, ad.mul(alpha, g))
    e = ad.sub(star, t_te)
    outer = ad.grad(ad.mul(e, e), theta).item()
    assert abs(star.item() - 0.8) < 1e-12
    assert abs(outer - (-1.92)) < 1e-10


def meta_fd_check(steps: int = 1, seed: int = 0, h: float = 1e-5, max_entries: int = 6) -> float:
    """Largest relative error between meta-gradients and central differences on a 2-8-3 net."""
    net = dense_network(2, (8,), 3)
    learner = Learner(net, NoiseGenerator(NoiseConfig("mult_softplus"), net))
    cfg = MetaConfig(inner_steps=steps, inner_lr=0.1, meta_batch=1)
    params = learner.init(seed, cfg)
    rng = np.random.default_rng(seed)
    # Non-zero noise maps so that phi genuinely matters.
    for k, v in params.phi.items():
        params.phi[k] = ad.tensor(0.3 * rng.standard_normal(v.shape))
    ep = synthetic2d(seed).sample("train", 0, 3, 2, 3)
    batch = EpisodeBatch.from_episodes([ep])
    draws = rng.standard_normal((steps, 1, 1, 6, 8))

    class Fixed:
        def __init__(self):
            self.i = 0

        def normal(self, shape):
            out = draws[self.i % steps].reshape(shape)
            self.i += 1
            return out

    def objective(p):
        return meta_objective(learner, p, batch, cfg, Fixed())[0].item()

    grads, _, _ = meta_gradients(learner, params, batch, cfg, Fixed())
    worst = 0.0
    for group in ("theta", "phi"):
        for name, t in params.group(group).items():
            flat = t.data.ravel()
            for j in rng.choice(flat.size, size=min(max_entries, flat.size), replace=False):
                vals = []
                for sgn in (1, -1):
                    arr = t.data.copy().ravel()
                    arr[j] += sgn * h
                    pg = {**params.group(group), name: ad.tensor(arr.reshape(t.shape))}
                    p2 = MetaParams(**{**{g: params.group(g) for g in MetaParams.GROUPS}, group: pg})
                    vals.append(objective(p2))
                fd = (vals[0] - vals[1]) / (2 * h)
                worst = max(worst, rel_err(grads[group][name].ravel()[j], fd, 1e-6))
    return worst


def check_meta_gradients():
    err = meta_fd_check(steps=1)
    assert err <= 1e-4, f"meta-gradient relative error {err:.2e}"


def check_pgd_contract():
    rng = np.random.default_rng(0)
    w = rng.standard_normal(4)

    def fn(x, y):
        return float((x @ w).sum()), np.broadcast_to(w, x.shape).copy()

    x = rng.random((200, 4))
    for norm in ("l1", "l2", "linf"):
        cfg = AttackConfig(norm, 0.3, steps=5, clip=None)
        adv = pgd_attack(fn, x, None, cfg, rng)
        assert np.all(perturbation_norm(adv - x, norm) <= 0.3 + 1e-9)
        assert np.array_equal(pgd_attack(fn, x, None, AttackConfig(norm, 0.0, steps=5), rng), x)


def check_boundary_signs():
    rng = np.random.default_rng(1)
    H = rng.standard_normal((200, 6))
    W = rng.standard_normal((6, 3))
    b = rng.standard_normal(3)
    p = boundary_project(H, W, b, 0, 2)
    agree = (p.cx > p.cx_db) == (H @ W[:, 0] + b[0] > H @ W[:, 2] + b[2])
    assert agree.all()


def check_zero_strength():
    net = dense_network(2, (8, 8), 3)
    ep = synthetic2d(0).sample("train", 0, 3, 2, 3)
    cfg = MetaConfig(inner_steps=2, inner_lr=0.1)
    plain = Learner(net, NoiseGenerator(NoiseConfig("none"), net))
    params = plain.init(0, cfg)
    base = inner_adapt(plain, params, ep.x_tr[None], ep.y_tr[None], cfg, None)
    for reg in (RegularizerConfig("mixup"), RegularizerConfig("adv_train", eps_train=0.0)):
        learner = Learner(net, plain.noise, reg)
        star = inner_adapt(learner, params, ep.x_tr[None], ep.y_tr[None], cfg, ConstantSource(beta=1.0))
        for k in base:
            assert np.array_equal(star[k].data, base[k].data), (reg.family, k)


def check_forward_identity():
    net = dense_network(2, (5, 5), 3)
    theta = init_params(net, 3)
    x = np.random.default_rng(3).standard_normal((4, 2))
    from .nn import StaticPlan

    a = forward(net, theta, x).data
    b = forward(net, theta, x, StaticPlan([np.ones((4, 5)), np.ones((4, 5))])).data
    assert np.array_equal(a, b)


CHECKS: dict[str, Callable] = {
    "scalar derivatives": check_scalar_derivatives,
    "closed forms": check_closed_forms,
    "quadratic MAML outer gradient": check_quadratic_maml,
    "meta-gradient finite differences": check_meta_gradients,
    "PGD projection contract": check_pgd_contract,
    "boundary sign consistency": check_boundary_signs,
    "zero-strength reductions": check_zero_strength,
    "forward with unit noise": check_forward_identity,
}


def run(report: Callable = print) -> bool:
    ok = True
    for name, fn in CHECKS.items():
        try:
            fn()
            report(f"PASS  {name}")
        except Exception as exc:  # report every failure, not just the first
            ok = False
            report(f"FAIL  {name}: {type(exc).__name__}: {exc}")
    return ok
