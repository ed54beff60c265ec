import numpy as np
import pytest

from metadrop import autodiff as ad
from metadrop.metalearn import (
    AdamState,
    EpisodeBatch,
    Learner,
    MetaConfig,
    MetaParams,
    MetaTrainer,
    NumericalAbort,
    adam_update,
    clip_gradients,
    evaluate,
    inner_adapt,
    inner_loss,
    meta_gradients,
    meta_step,
    meta_test,
    meta_train,
)
from metadrop.nn import dense_network
from metadrop.noise import ConstantSource, NoiseConfig, NoiseGenerator, RandomSource, episode_stream
from metadrop.selftest import meta_fd_check
from metadrop.tasks import synthetic2d

NET = dense_network(2, (8, 8), 3)
DIST = synthetic2d(0)


def learner(mode="mult_softplus", net=NET):
    return Learner(net, NoiseGenerator(NoiseConfig(mode), net))


def batch(n=2, way=3, shot=2, m=4, split="train"):
    return EpisodeBatch.from_episodes(DIST.episodes(split, n, way, shot, m))


def test_quadratic_surrogate_inner_step_and_outer_gradient():
    theta = ad.tensor(1.0)
    d = ad.sub(theta, 0.0)
    star = ad.sub(theta, ad.mul(0.1, ad.grad(ad.mul(d, d), theta, create_graph=True)))
    assert star.item() == pytest.approx(0.8, abs=1e-15)
    e = ad.sub(star, 2.0)
    outer = ad.grad(ad.mul(e, e), theta).item()
    assert abs(outer - 2 * (0.8 - 2) * (1 - 2 * 0.1)) < 1e-10
    assert abs(outer - (-1.92)) < 1e-10


def test_zero_step_size_leaves_theta_unchanged():
    lr = learner()
    cfg = MetaConfig()
    params = lr.init(0, cfg)
    b = batch()
    star = inner_adapt(lr, params, b.x_tr, b.y_tr, cfg, RandomSource(np.random.default_rng(0)), lr=0.0)
    for k, p in params.theta.items():
        assert np.array_equal(star[k].data, np.broadcast_to(p.data, star[k].shape))


def test_config_invariants():
    for bad in ({"inner_steps": 0}, {"inner_lr": 0.0}, {"samples_test": 0}, {"clip_low": 3, "clip_high": -3}):
        with pytest.raises(ValueError):
            MetaConfig(**bad)


def test_zero_steps_override_scores_initialisation():
    lr = learner()
    cfg = MetaConfig()
    params = lr.init(0, cfg)
    eps = DIST.episodes("test", 3, 3, 1, 5)
    recs = meta_test(lr, params, eps, cfg, seed=0, steps=0)
    b = EpisodeBatch.from_episodes(eps)
    theta = {k: ad.constant(np.broadcast_to(v.data, (3, 1) + v.shape)) for k, v in params.theta.items()}
    _, acc = evaluate(lr, theta, params.phi, b.x_te, b.y_te)
    assert [r.accuracy for r in recs] == acc.tolist()


def test_generous_adaptation_fits_separable_training_split():
    lr = learner("none")
    cfg = MetaConfig(inner_steps=100, inner_lr=0.5)
    params = lr.init(0, cfg)
    dist = synthetic2d(0, jitter=(0.01, 0.01))
    b = EpisodeBatch.from_episodes(dist.episodes("test", 4, 3, 3, 5))
    star = inner_adapt(lr, params, b.x_tr, b.y_tr, cfg, None)
    _, acc = evaluate(lr, star, params.phi, b.x_tr, b.y_tr)
    assert np.all(acc == 1.0)


def test_phi_unchanged_by_inner_adaptation():
    lr = learner()
    cfg = MetaConfig(inner_steps=3)
    params = lr.init(0, cfg)
    before = {k: v.data.copy() for k, v in params.phi.items()}
    b = batch()
    for create_graph in (False, True):
        inner_adapt(lr, params, b.x_tr, b.y_tr, cfg, RandomSource(np.random.default_rng(0)), create_graph)
    assert all(np.array_equal(before[k], params.phi[k].data) for k in before)


def test_phi_without_influence_has_exactly_zero_gradient():
    noisy = learner()
    cfg = MetaConfig(inner_steps=2)
    params = noisy.init(0, cfg)
    off = learner("none")
    grads, _, _ = meta_gradients(off, params, batch(), cfg, None)
    assert grads["phi"]
    assert all(not np.any(g) for g in grads["phi"].values())


def test_clip_is_elementwise():
    out = clip_gradients({"a": np.array([7.3, -9.0, 0.5])}, -3.0, 3.0)["a"]
    assert out.tolist() == [3.0, -3.0, 0.5]


def test_adam_matches_reference_update():
    p = {"w": ad.tensor(np.array([1.0, -2.0]))}
    state = AdamState.zeros_like(p)
    g = np.array([0.5, -0.1])
    p = adam_update(p, {"w": g}, state, 0.01)
    # First bias-corrected Adam step moves each coordinate by lr * sign(g).
    np.testing.assert_allclose(p["w"].data, [1.0 - 0.01, -2.0 + 0.01], rtol=1e-7)
    g2 = np.array([0.2, 0.3])
    m = 0.9 * 0.1 * g + 0.1 * g2
    v = 0.999 * 0.001 * g * g + 0.001 * g2 * g2
    step = 0.01 * (m / (1 - 0.9 ** 2)) / (np.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    expected = p["w"].data - step
    p = adam_update(p, {"w": g2}, state, 0.01)
    np.testing.assert_allclose(p["w"].data, expected, rtol=1e-14)


@pytest.mark.parametrize("steps", [1, 3])
def test_second_order_meta_gradient(steps):
    assert meta_fd_check(steps=steps, seed=steps) <= 1e-4


def test_meta_step_updates_theta_and_phi():
    lr = learner()
    cfg = MetaConfig(inner_steps=2)
    params = lr.init(0, cfg)
    adam = {g: AdamState.zeros_like(params.group(g)) for g in MetaParams.GROUPS}
    b = batch()
    new, loss, acc = meta_step(lr, params, b, cfg, adam, RandomSource([episode_stream(0, i) for i in range(2)]))
    assert loss.shape == (2,) and acc.shape == (2,)
    assert any(not np.array_equal(new.theta[k].data, params.theta[k].data) for k in params.theta)
    assert any(not np.array_equal(new.phi[k].data, params.phi[k].data) for k in params.phi)


def test_meta_sgd_learns_floored_rates():
    lr = learner()
    cfg = MetaConfig(inner_steps=1, meta_sgd=True, outer_lr=0.5, inner_lr=0.1)
    params = lr.init(0, cfg)
    assert set(params.lrs) == set(params.theta)
    assert all(np.all(v.data == 0.1) for v in params.lrs.values())
    trainer = MetaTrainer(lr, params, cfg)
    for t in range(3):
        trainer.step(EpisodeBatch.from_episodes(DIST.episodes("train", 2, 3, 1, 4, start=2 * t)))
    rates = np.concatenate([v.data.ravel() for v in trainer.params.lrs.values()])
    assert np.all(rates >= cfg.lr_floor)
    assert np.any(rates != 0.1)


def test_episode_batching_matches_single_episodes():
    lr = learner()
    cfg = MetaConfig(inner_steps=2)
    params = lr.init(1, cfg)
    eps = DIST.episodes("test", 4, 3, 1, 4)
    together = meta_test(lr, params, eps, cfg, seed=0, chunk_size=4)
    alone = meta_test(lr, params, eps, cfg, seed=0, chunk_size=1)
    threaded = meta_test(lr, params, eps, cfg, seed=0, chunk_size=1, threads=3)
    assert [r.accuracy for r in together] == [r.accuracy for r in alone] == [r.accuracy for r in threaded]
    np.testing.assert_allclose([r.loss for r in together], [r.loss for r in alone], rtol=1e-12)
    assert [r.loss for r in alone] == [r.loss for r in threaded]


def test_batched_meta_gradient_is_mean_of_episode_gradients():
    lr = learner()
    cfg = MetaConfig(inner_steps=1)
    params = lr.init(2, cfg)
    b = batch(n=3)
    both, _, _ = meta_gradients(lr, params, b, cfg, ConstantSource())
    single = [meta_gradients(lr, params, b.subset(i), cfg, ConstantSource())[0] for i in range(3)]
    for g in ("theta", "phi"):
        for k in both[g]:
            np.testing.assert_allclose(both[g][k], np.mean([s[g][k] for s in single], axis=0), atol=1e-13)


def test_training_is_deterministic():
    lr = learner()
    cfg = MetaConfig(inner_steps=1, iterations=3)

    def run():
        t = meta_train(lr, lr.init(0, cfg), lambda i: DIST.episodes("train", 2, 3, 1, 4, start=2 * i), cfg)
        return t.params.arrays()

    a, b = run(), run()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def _bad_batch(good: int, bad: int):
    eps = DIST.episodes("train", good + bad, 3, 1, 4)
    for e in eps[good:]:
        e.x_tr = np.full_like(e.x_tr, 1e308)
    return EpisodeBatch.from_episodes(eps)


def test_non_finite_episodes_are_dropped():
    lr = learner()
    cfg = MetaConfig(inner_steps=1)
    trainer = MetaTrainer(lr, lr.init(0, cfg), cfg)
    info = trainer.step(_bad_batch(2, 1))
    assert info["dropped"] == 1 and len(trainer.failures) == 1
    assert np.isfinite(info["loss"])


def test_three_consecutive_failures_abort():
    lr = learner()
    cfg = MetaConfig(inner_steps=1)
    trainer = MetaTrainer(lr, lr.init(0, cfg), cfg)
    with pytest.raises(NumericalAbort):
        trainer.step(_bad_batch(1, 3))


def test_mc_estimator_sd_scales_as_inverse_sqrt_samples():
    lr = learner()
    cfg = MetaConfig()
    params = lr.init(0, cfg)
    phi = dict(params.phi)
    b = batch(n=1)
    sds = []
    for s in (1, 4, 16, 64):
        vals = [inner_loss(lr, params.theta, phi, b.x_tr, b.y_tr, RandomSource(episode_stream(9, r, s)), s)[0].item()
                for r in range(50)]
        sds.append(np.std(vals, ddof=1))
    slope = np.polyfit(np.log([1, 4, 16, 64]), np.log(sds), 1)[0]
    assert -0.6 <= slope <= -0.4
