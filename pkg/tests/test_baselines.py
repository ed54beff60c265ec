import warnings

import numpy as np
import pytest

from metadrop import autodiff as ad
from metadrop.baselines import (
    MixupPlan,
    RegularizerConfig,
    adversarial_inner,
    gaussian_kl,
    info_dropout_layer,
    init_extra_params,
    mixup_apply,
    vib_layer,
)
from metadrop.eval import AttackConfig, perturbation_norm, pgd_attack
from metadrop.metalearn import Learner, MetaConfig, inner_adapt
from metadrop.nn import dense_network
from metadrop.noise import ConstantSource, NoiseConfig, NoiseGenerator, RandomSource
from metadrop.tasks import synthetic2d
from oracles import KL_SIGMA2

NET = dense_network(2, (6, 6), 3)


def test_mixup_lambda_one_is_identity():
    x = np.arange(8.0).reshape(4, 2)
    y = np.eye(3)[[0, 1, 2, 0]]
    xm, ym, _ = mixup_apply(x, y, 2.0, RandomSource(np.random.default_rng(0)), lam=1.0)
    assert np.array_equal(xm, x) and np.array_equal(ym, y)


def test_mixup_midpoint():
    x = np.array([[0.0, 0.0], [2.0, 4.0]])
    y = np.eye(2)
    xm, ym, _ = mixup_apply(x, y, 2.0, None, lam=0.5, perm=np.array([1, 0]))
    assert xm[0].tolist() == [1.0, 2.0]
    assert ym[0].tolist() == [0.5, 0.5]


def test_mixup_lambda_is_symmetric_beta():
    src = RandomSource(np.random.default_rng(1))
    lam = src.beta(0.2, 0.2, (100_000,))
    se = lam.std(ddof=1) / np.sqrt(lam.size)
    assert abs(lam.mean() - 0.5) < 3 * se


def test_mixup_single_instance_warns_and_returns_unchanged():
    x, y = np.ones((1, 2)), np.eye(2)[:1]
    with pytest.warns(RuntimeWarning):
        xm, ym, lam = mixup_apply(x, y, 2.0, None)
    assert np.array_equal(xm, x) and lam == 1.0
    with pytest.warns(RuntimeWarning):
        plan = MixupPlan(RegularizerConfig("mixup"), 2, None, (1, 1), 1)
    assert plan.warnings


def test_mixup_plan_mixes_features_and_labels_with_one_matrix():
    cfg = RegularizerConfig("mixup", gamma=2.0)
    src = RandomSource(np.random.default_rng(2))
    plan = MixupPlan(cfg, 0, src, (1, 1), 4)  # zero hidden layers: always the input
    x = ad.constant(np.random.default_rng(3).standard_normal((1, 1, 4, 2)))
    mixed = plan.features(0, x).data
    labels = plan.labels(np.broadcast_to(np.eye(4), (1, 1, 4, 4)))
    np.testing.assert_allclose(mixed, labels @ x.data, atol=1e-15)
    np.testing.assert_allclose(labels.sum(-1), 1.0, atol=1e-15)


def test_info_dropout_zero_eps_is_identity():
    f = ad.constant(np.random.default_rng(0).standard_normal((3, 4)))
    alpha = ad.constant(np.full((3, 4), 0.5))
    out, pen = info_dropout_layer(f, alpha, 1.0, ConstantSource())
    assert np.array_equal(out.data, f.data)
    assert pen.item() == pytest.approx(-12 * np.log(0.5))


def test_info_dropout_floor_keeps_penalty_finite():
    from metadrop.baselines import ALPHA_FLOOR, info_dropout_alpha

    theta = init_extra_params(RegularizerConfig("info_dropout"), NET)
    theta["reg/alpha0/b"] = ad.tensor(np.full((1, 6), -1e4))
    alpha = info_dropout_alpha(NET.hidden[0], theta, 0, ad.constant(np.zeros((2, 2))), 0.7)
    assert np.all(alpha.data >= ALPHA_FLOOR)
    _, pen = info_dropout_layer(ad.constant(np.ones((2, 6))), alpha, 1.0, ConstantSource())
    assert np.isfinite(pen.item()) and pen.item() > 0


def test_info_dropout_lognormal_median():
    f = ad.constant(np.ones((250_000, 4)))
    alpha = ad.constant(np.full((250_000, 4), 0.5))
    out, _ = info_dropout_layer(f, alpha, 1.0, RandomSource(np.random.default_rng(4)))
    assert np.median(out.data) == pytest.approx(1.0, abs=1e-2)


def test_info_dropout_alpha_capped():
    with pytest.raises(ValueError):
        RegularizerConfig("info_dropout", alpha_max=1.5)


@pytest.mark.parametrize("mu,sigma,expected", [(0.0, 1.0, 0.0), (1.0, 1.0, 0.5), (0.0, 2.0, KL_SIGMA2)])
def test_gaussian_kl_closed_forms(mu, sigma, expected):
    kl = gaussian_kl(ad.constant(np.array([mu])), ad.constant(np.array([sigma]))).item()
    assert kl == pytest.approx(expected, abs=1e-15)


def test_vib_kl_non_negative_and_zero_eps_keeps_mean():
    rng = np.random.default_rng(5)
    theta = {k: ad.tensor(v.data + 0.3 * rng.standard_normal(v.shape))
             for k, v in init_extra_params(RegularizerConfig("vib"), NET).items()}
    for _ in range(20):
        h = ad.constant(rng.standard_normal((5, 6)) * 3)
        z, pen = vib_layer(h, theta, 1.0, RandomSource(rng))
        assert pen.item() >= 0
    z, _ = vib_layer(h, theta, 1.0, ConstantSource())
    assert np.array_equal(z.data, h.data)


def test_regulariser_config_validation():
    with pytest.raises(ValueError):
        RegularizerConfig("cutout")
    with pytest.raises(ValueError):
        RegularizerConfig(gamma=0.0)
    with pytest.raises(ValueError):
        RegularizerConfig(beta_ib=-1.0)
    with pytest.raises(ValueError):
        RegularizerConfig(pgd_steps_train=0)


def _episode():
    ep = synthetic2d(3).sample("train", 0, 3, 2, 4)
    return ep.x_tr[None], ep.y_tr[None]


@pytest.mark.parametrize("family", ["info_dropout", "vib"])
def test_extra_parameters_adapt_in_inner_loop(family):
    reg = RegularizerConfig(family, beta_ib=1e-2)
    learner = Learner(NET, NoiseGenerator(NoiseConfig("none"), NET), reg)
    cfg = MetaConfig(inner_steps=3)
    params = learner.init(0, cfg)
    x, y = _episode()
    star = inner_adapt(learner, params, x, y, cfg, RandomSource(np.random.default_rng(0)))
    extra = [k for k in params.theta if k.startswith("reg/")]
    assert extra
    assert any(not np.array_equal(star[k].data[0, 0], params.theta[k].data) for k in extra)


def test_adversarial_zero_radius_is_plain_maml():
    learner = Learner(NET, NoiseGenerator(NoiseConfig("none"), NET))
    cfg = MetaConfig(inner_steps=2)
    params = learner.init(0, cfg)
    x, y = _episode()
    plain = inner_adapt(learner, params, x, y, cfg, None)
    adv = adversarial_inner(learner, params, x, y, cfg, eps=0.0, source=RandomSource(np.random.default_rng(0)))
    assert all(np.array_equal(plain[k].data, adv[k].data) for k in plain)
    moved = adversarial_inner(learner, params, x, y, cfg, eps=0.3, source=RandomSource(np.random.default_rng(0)))
    assert any(not np.array_equal(plain[k].data, moved[k].data) for k in plain)


@pytest.mark.parametrize("norm", ["l1", "l2", "linf"])
def test_adversarial_training_inputs_stay_in_ball(norm):
    from metadrop.baselines import adversarial_inputs
    from metadrop.metalearn import _clean_loss_grad

    learner = Learner(NET, NoiseGenerator(NoiseConfig("none"), NET))
    params = learner.init(0, MetaConfig())
    x, y = _episode()
    theta = {k: ad.constant(v.data[None, None]) for k, v in params.theta.items()}
    reg = RegularizerConfig("adv_train", eps_train=0.25, norm=norm)
    xa = adversarial_inputs(_clean_loss_grad(learner, theta, {}), x, y, reg, RandomSource(np.random.default_rng(1)), 1)
    assert np.all(perturbation_norm(xa - x, norm) <= 0.25 + 1e-9)


def test_single_linf_step_matches_hand_computation():
    w = np.array([1.0, -2.0])
    x = np.array([[0.5, 0.5]])

    def fn(xa, _):
        return float(np.sum(xa @ w)), np.broadcast_to(w, xa.shape)

    cfg = AttackConfig("linf", eps=0.1, steps=1, random_start=False, clip=(0.0, 1.0))
    out = pgd_attack(fn, x, None, cfg)
    eta = 2.5 * 0.1
    expected = np.clip(x + np.clip(eta * np.sign(w), -0.1, 0.1), 0, 1)
    assert np.array_equal(out, expected)
    assert out.tolist() == [[0.6, 0.4]]
