import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from drnd.bonus import (
    BonusConfig,
    DrndModel,
    InputNormalizer,
    MomentSet,
    RunningNormalizer,
    TargetEnsemble,
    bonus_b1,
    bonus_b2,
    bonus_total,
    distill_step,
    ensemble_from_dict,
    ensemble_init,
    ensemble_to_dict,
    load_checkpoint,
    moments,
    normalize_intrinsic,
    predictor_from_dict,
    predictor_init,
    predictor_to_dict,
    sample_c,
    save_checkpoint,
)
from drnd.errors import ConfigurationError, DegenerateError, NumericError
from drnd.nn import MlpParams, MlpSpec, mlp_forward, mlp_init
from drnd.rng import make_rng


def const_net(value, in_dim=1):
    """Linear net ignoring its input and emitting ``value``."""
    v = np.atleast_1d(np.asarray(value, dtype=float))
    return MlpParams(MlpSpec((in_dim, v.size), "identity"), [np.zeros((in_dim, v.size))], [v])


def two_point_ensemble():
    targets = (const_net(0.0), const_net(2.0))
    return TargetEnsemble(targets[0].spec, targets)


SPEC = MlpSpec((3, 8, 4), "relu", 11)


# --- ensemble and moments -----------------------------------------------


def test_ensemble_distinct_members():
    ens = ensemble_init(SPEC, 10, seed=1)
    assert ens.n == 10
    assert len({t.digest() for t in ens.targets}) == 10


def test_ensemble_rejects_zero():
    with pytest.raises(ConfigurationError):
        ensemble_init(SPEC, 0)


def test_ensemble_nested():
    small, big = ensemble_init(SPEC, 3, seed=4), ensemble_init(SPEC, 8, seed=4)
    assert [t.digest() for t in small.targets] == [t.digest() for t in big.targets[:3]]
    assert big.subset(3).digest() == small.digest()


def test_single_target_moments():
    ens = ensemble_init(SPEC, 1, seed=2)
    x = np.ones(3)
    mom = moments(ens, x)
    out = mlp_forward(ens.targets[0], x)
    assert np.array_equal(mom.mu, out)
    assert np.array_equal(mom.b2, out * out)


def test_rademacher_targets():
    ens = ensemble_init(MlpSpec((5, 4)), 2, "rademacher")
    x = make_rng(0, "x").standard_normal(5)
    outs = ens.outputs(x)
    assert np.array_equal(outs[0], -np.ones(4)) and np.array_equal(outs[1], np.ones(4))
    mom = moments(ens, x)
    assert np.array_equal(mom.mu, np.zeros(4)) and np.array_equal(mom.b2, np.ones(4))


def test_rademacher_requires_two():
    with pytest.raises(ConfigurationError):
        ensemble_init(MlpSpec((5, 4)), 3, "rademacher")


def test_two_point_moments():
    mom = moments(two_point_ensemble(), [0.3])
    assert mom.mu[0] == 1.0 and mom.b2[0] == 2.0


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(0, 10_000))
def test_second_moment_dominates_mean_square(n, seed):
    ens = ensemble_init(SPEC, n, seed=seed)
    x = make_rng(seed, "x").standard_normal((4, 3))
    mom = moments(ens, x)
    assert np.all(mom.b2 >= mom.mu ** 2 - 1e-12)


def test_targets_frozen():
    ens = ensemble_init(SPEC, 3, seed=1)
    h = ens.digest()
    with pytest.raises(ValueError):
        ens.targets[0].weights[0][0, 0] = 1.0
    m = DrndModel(ens, predictor_init(MlpSpec((3, 8, 4), "relu", 5), 1e-2), BonusConfig())
    rng = make_rng(0, "d")
    for _ in range(10):
        m.distill(rng.standard_normal((8, 3)), rng)
    assert ens.digest() == h


# --- sampling -------------------------------------------------------------


def test_sample_single_target():
    ens = ensemble_init(SPEC, 1, seed=1)
    x = np.ones(3)
    rng = make_rng(0, "s")
    for _ in range(5):
        assert np.array_equal(sample_c(ens, x, rng), mlp_forward(ens.targets[0], x))


def test_sample_two_point_mean():
    ens = two_point_ensemble()
    x = np.zeros((1_000_000, 1))
    c = sample_c(ens, x, make_rng(1, "mc"))[:, 0]
    se = c.std(ddof=1) / math.sqrt(c.size)
    assert abs(c.mean() - 1.0) <= 3 * se


def test_sample_reproducible():
    ens = ensemble_init(SPEC, 5, seed=1)
    x = make_rng(0, "x").standard_normal((6, 3))
    a = sample_c(ens, x, make_rng(9, "c"))
    b = sample_c(ens, x, make_rng(9, "c"))
    assert np.array_equal(a, b)


# --- distillation ---------------------------------------------------------


def test_distill_zero_loss_keeps_params():
    pred = predictor_init(MlpSpec((2, 4, 3), "relu", 1))
    x = make_rng(0, "x").standard_normal((5, 2))
    c = mlp_forward(pred.params, x)
    loss, new = distill_step(pred, x, c)
    assert loss == 0.0
    assert new.params.digest() == pred.params.digest()


def test_distill_scalar_loss_value():
    pred = type(predictor_init(MlpSpec((1, 1))))(const_net(1.0), predictor_init(MlpSpec((1, 1))).opt)
    loss, _ = distill_step(pred, [[0.5]], [[3.0]])
    assert loss == 4.0


def test_distill_loss_decreases_on_fixed_batch():
    pred = predictor_init(MlpSpec((3, 16, 16, 4), "relu", 2), lr=1e-3)
    rng = make_rng(0, "batch")
    x, c = rng.standard_normal((32, 3)), rng.standard_normal((32, 4))
    losses = []
    for _ in range(101):
        loss, pred = distill_step(pred, x, c)
        losses.append(loss)
    assert np.mean(np.diff(losses) < 0) >= 0.9
    assert losses[-1] < losses[0]


def test_distill_nonfinite_raises():
    pred = predictor_init(MlpSpec((1, 1)))
    with pytest.raises(NumericError):
        distill_step(pred, [[1.0]], [[np.inf]])


def test_recorded_draws_converge_to_their_mean():
    # one input seen n=6 times with recorded draws: the optimum is the draw mean
    ens = ensemble_init(MlpSpec((2, 8, 3), "relu", 3), 10, seed=3)
    x = np.tile([0.4, -0.7], (6, 1))
    c = sample_c(ens, x, make_rng(0, "draws"))
    pred = predictor_init(MlpSpec((2, 16, 16, 3), "relu", 4), lr=1e-2)
    for _ in range(3000):
        _, pred = distill_step(pred, x, c)
    assert np.max(np.abs(mlp_forward(pred.params, x[0]) - c.mean(axis=0))) < 1e-3


# --- bonus terms ----------------------------------------------------------


def test_b1_values():
    mom = MomentSet(np.array([1.0]), np.array([2.0]))
    assert bonus_b1(const_net(3.0), mom, [0.0]) == 4.0
    assert bonus_b1(const_net(1.0), mom, [0.0]) == 0.0


def test_b2_substitution():
    mom = MomentSet(np.array([1.0]), np.array([2.0]))
    assert bonus_b2(const_net(2.0), mom, [0.0], BonusConfig()) == pytest.approx(math.sqrt(3.0), abs=1e-12)


def test_b2_clamps_negative_numerator():
    mom = MomentSet(np.array([1.0]), np.array([2.0]))
    assert bonus_b2(const_net(1.0), mom, [0.0], BonusConfig()) == 0.0
    assert bonus_b2(const_net(0.5), mom, [0.0], BonusConfig()) == 0.0


def test_b2_degenerate_when_unclamped():
    mom = MomentSet(np.array([1.0]), np.array([1.0]))
    cfg = BonusConfig(clamp_negative_numerator=False)
    with pytest.raises(DegenerateError):
        bonus_b2(const_net(2.0), mom, [0.0], cfg)


def test_b2_upper_clamp():
    mom = MomentSet(np.array([1.0]), np.array([2.0]))
    assert bonus_b2(const_net(2.0), mom, [0.0], BonusConfig(ratio_upper_clamp=1.0)) == 1.0


def test_bonus_total_values():
    assert bonus_total(4.0, math.sqrt(3), BonusConfig(alpha=0.9)) == pytest.approx(3.77321, abs=1e-5)
    assert bonus_total(4.0, 7.0, BonusConfig(alpha=1.0)) == 4.0
    assert bonus_total(4.0, 7.0, BonusConfig(alpha=0.0)) == 7.0


@pytest.mark.parametrize("alpha", [-0.1, 1.5])
def test_alpha_range(alpha):
    with pytest.raises(ConfigurationError, match="alpha"):
        BonusConfig(alpha=alpha)


def test_rnd_reduction_bit_exact():
    m = DrndModel.build("rnd", 6, 8, 16, seed=3)
    x = make_rng(0, "x").standard_normal((1000, 6))
    err = mlp_forward(m.predictor.params, x) - mlp_forward(m.ensemble.targets[0], x)
    assert np.array_equal(m.bonus(x), np.sum(err * err, axis=1))


def test_cfn_reduction_bit_exact():
    m = DrndModel.build("cfn", 6, 8, 16, seed=3)
    x = make_rng(0, "x").standard_normal((1000, 6))
    f = mlp_forward(m.predictor.params, x)
    assert np.array_equal(m.bonus(x), np.sqrt(np.sum(f * f, axis=1) / 8))


def test_b2_shrinks_with_repeated_distillation():
    x = np.array([[0.2, -0.5, 0.9]])
    per_k = {1: [], 10: [], 100: []}
    for seed in range(10):
        ens = ensemble_init(MlpSpec((3, 16, 8), "relu"), 10, seed=seed)
        m = DrndModel(ens, predictor_init(MlpSpec((3, 16, 16, 8), "relu", seed + 100), 1e-3),
                      BonusConfig(alpha=0.0))
        rng = make_rng(seed, "rep")
        done = 0
        for k in (1, 10, 100):
            while done < k:
                m.distill(np.repeat(x, 16, axis=0), rng)
                done += 1
            per_k[k].append(float(m.components(x)[1][0]))
    meds = [np.median(per_k[k]) for k in (1, 10, 100)]
    assert meds[0] >= meds[1] >= meds[2]


# --- analytic input gradient ----------------------------------------------


@pytest.mark.parametrize("alpha,norm", [(0.9, False), (0.0, False), (1.0, False), (0.9, True), (0.5, True)])
def test_bonus_input_gradient(alpha, norm):
    m = DrndModel.build("drnd", 3, 6, 12, n_targets=5, alpha=alpha, seed=7, normalize_inputs=norm)
    rng = make_rng(1, "g")
    if norm:
        m.input_norm.update(rng.standard_normal((200, 3)))
    x = rng.standard_normal((6, 3))
    b, g = m.bonus_and_input_grad(x)
    assert np.allclose(b, m.bonus(x), rtol=0, atol=1e-12)
    h = 1e-6
    num = np.zeros_like(x)
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        num[:, j] = (m.bonus(x + e) - m.bonus(x - e)) / (2 * h)
    assert np.max(np.abs(g - num) / (1 + np.abs(g))) < 1e-4


# --- normalizers ----------------------------------------------------------


def test_normalize_empty_batch():
    norm = RunningNormalizer()
    before = (norm.stats.mean, norm.stats.var, norm.stats.count, norm.returns.copy())
    out = normalize_intrinsic(norm, np.array([]))
    assert out.size == 0
    assert (norm.stats.mean, norm.stats.var, norm.stats.count) == before[:3]
    assert np.array_equal(norm.returns, before[3])


def test_normalize_constant_stream_finite():
    norm = RunningNormalizer(gamma=0.0)
    for _ in range(100):
        out = normalize_intrinsic(norm, np.full(16, 0.5))
    assert np.isfinite(out).all() and np.all(np.abs(out) < 1e9)


def test_normalize_scale_invariant():
    rng = make_rng(0, "stream")
    r = np.abs(rng.standard_normal(10_000))
    a, b = RunningNormalizer(), RunningNormalizer()
    outs_a = [normalize_intrinsic(a, r[i:i + 100]) for i in range(0, r.size, 100)]
    outs_b = [normalize_intrinsic(b, 10 * r[i:i + 100]) for i in range(0, r.size, 100)]
    ta, tb = np.concatenate(outs_a[-10:]), np.concatenate(outs_b[-10:])
    assert np.max(np.abs(ta - tb) / np.abs(ta).max()) < 0.05


def test_normalize_rejects_nonfinite():
    with pytest.raises(NumericError):
        normalize_intrinsic(RunningNormalizer(), np.array([np.nan]))


def test_input_normalizer_clips():
    n = InputNormalizer(2, clip=5.0)
    n.update(make_rng(0, "n").standard_normal((1000, 2)))
    assert np.all(np.abs(n(np.array([[100.0, -100.0]]))) == 5.0)


# --- checkpoints ----------------------------------------------------------


def test_checkpoint_round_trip(tmp_path):
    ens = ensemble_init(MlpSpec((3, 8, 4), "relu", 0, "fan_in_uniform"), 4, seed=2)
    pred = predictor_init(MlpSpec((3, 8, 8, 4), "relu", 5), 1e-3)
    _, pred = distill_step(pred, np.ones((2, 3)), np.zeros((2, 4)))
    save_checkpoint(tmp_path / "e.json", ensemble_to_dict(ens))
    save_checkpoint(tmp_path / "p.json", predictor_to_dict(pred))
    ens2 = ensemble_from_dict(load_checkpoint(tmp_path / "e.json"))
    pred2 = predictor_from_dict(load_checkpoint(tmp_path / "p.json"))
    assert ens2.digest() == ens.digest() and ens2.spec.init == "fan_in_uniform"
    assert pred2.params.digest() == pred.params.digest()
    assert pred2.opt.step == 1 and pred2.opt.m.digest() == pred.opt.m.digest()
    # resuming gives the same next step
    x, c = np.full((2, 3), 0.5), np.ones((2, 4))
    assert distill_step(pred, x, c)[1].params.digest() == distill_step(pred2, x, c)[1].params.digest()


def test_checkpoint_rejects_wrong_kind():
    ens = ensemble_init(MlpSpec((3, 4)), 2, seed=2)
    with pytest.raises(ConfigurationError):
        predictor_from_dict(ensemble_to_dict(ens))
