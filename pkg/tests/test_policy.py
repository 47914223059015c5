import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dicap import autodiff as ad
from dicap.channels import (
    ChannelSpec,
    FixedPolicy,
    Rollout,
    mutual_information,
    output_law,
    sample_trajectory,
    z_capacity,
)
from dicap.nn import softmax_pmf
from dicap.policy import (
    explore_schedule,
    GeneratorPolicy,
    MiTrainConfig,
    PmfGenerator,
    PolicyGradConfig,
    TrainingError,
    _ascent_grads,
    cluster_learned_pmf,
    generator_trajectory,
    mi_policy_gradient,
    mine_policy_objective,
    mix_uniform,
    pmf_step,
    policy_objective,
    q_hat,
    q_hat_all,
    train_di,
    train_mi,
)
from tests.conftest import check_grads


def scrambled_generator(feedback, seed=0, scale=3.0):
    """Generator with a nonzero output layer so PMFs actually vary."""
    rng = np.random.default_rng(seed)
    gen = PmfGenerator(2, 2, feedback, rng, hidden=8, fc=(8,))
    for p in gen.params:
        p.value = p.value + scale * rng.normal(size=p.shape) / math.sqrt(p.size)
    return gen


# generator ------------------------------------------------------------------


def test_untrained_generator_is_uniform(rng):
    gen = PmfGenerator(2, 2, True, rng)
    p, state = pmf_step(gen, np.array([-1, -1]), np.array([-1, -1]), gen.zero_state(2))
    assert np.allclose(p, 0.5)
    assert state[0].shape == (2, 32)


def test_feedback_off_purity():
    gen = scrambled_generator(False, seed=3)
    rng = np.random.default_rng(0)
    x = rng.integers(0, 2, (200, 4))
    a = gen.logits_sequence(x, rng.integers(0, 2, (200, 4)), gen.zero_state(4)).value
    b = gen.logits_sequence(x, rng.integers(0, 2, (200, 4)), gen.zero_state(4)).value
    c = gen.logits_sequence(x, np.full((200, 4), -1), gen.zero_state(4)).value
    assert np.array_equal(a, b) and np.array_equal(a, c)
    # and through a full rollout on a channel with memory
    spec = ChannelSpec.trapdoor()
    t1 = Rollout(spec, GeneratorPolicy(gen), 3, False, np.random.default_rng(5)).segment(300).traj
    t2 = Rollout(spec, GeneratorPolicy(gen), 3, False, np.random.default_rng(5)).segment(300).traj
    assert np.array_equal(t1.pmf, t2.pmf)


def test_feedback_on_generator_reads_outputs():
    gen = scrambled_generator(True, seed=3)
    rng = np.random.default_rng(0)
    x = rng.integers(0, 2, (50, 4))
    a = gen.logits_sequence(x, np.zeros((50, 4), dtype=int), gen.zero_state(4)).value
    b = gen.logits_sequence(x, np.ones((50, 4), dtype=int), gen.zero_state(4)).value
    assert not np.allclose(a, b)


def test_log_prob_gradient_finite_difference():
    gen = scrambled_generator(True, seed=1, scale=1.0)
    rng = np.random.default_rng(2)
    x_prev = rng.integers(0, 2, (6, 2))
    y_prev = rng.integers(0, 2, (6, 2))
    x = rng.integers(0, 2, (6, 2))

    def build():
        logp = ad.gather(ad.log_softmax(gen.logits_sequence(x_prev, y_prev, gen.zero_state(2))), x)
        return ad.sum_(logp)

    assert check_grads(build, gen.params) <= 1e-5


def test_simplex_invariant_over_random_steps():
    rng = np.random.default_rng(7)
    for trial in range(4):
        gen = scrambled_generator(bool(trial % 2), seed=trial, scale=20.0)
        state = gen.zero_state(16)
        x_prev = np.full(16, -1)
        y_prev = np.full(16, -1)
        for _ in range(250):
            p, state = pmf_step(gen, x_prev, y_prev, state)
            for q in (p, mix_uniform(p, 0.01)):
                assert np.all(q >= 0) and np.all(np.abs(q.sum(-1) - 1) <= 1e-9)
            x_prev = rng.integers(0, 2, 16)
            y_prev = rng.integers(0, 2, 16)


def test_sequence_replay_matches_stepping():
    gen = scrambled_generator(True, seed=4)
    rng = np.random.default_rng(1)
    xs, ys = rng.integers(0, 2, (20, 3)), rng.integers(0, 2, (20, 3))
    logits = gen.logits_sequence(xs, ys, gen.zero_state(3)).value
    state = gen.zero_state(3)
    for t in range(20):
        p, state = pmf_step(gen, xs[t], ys[t], state)
        assert np.allclose(p, softmax_pmf(logits[t]), atol=1e-14)


# truncated Q --------------------------------------------------------------


def test_q_hat_examples():
    c = 0.37
    r = np.full(12, c)
    assert q_hat(r, c, 4, 1) == 0.0
    r = np.random.default_rng(0).normal(size=12)
    for t in range(12):
        assert q_hat(r, 0.2, t, 1) == r[t] - 0.2
    # the estimate is subtracted once, not once per summand
    assert q_hat(np.ones(10), 0.5, 0, 4) == 3.5
    for bad in ((9, 2), (0, 11), (-1, 2), (0, 0)):
        with pytest.raises(ValueError):
            q_hat(r[:10], 0.1, *bad)
    with pytest.raises(ValueError):
        q_hat_all(np.zeros(5), 0.0, 5)


def _naive_q(r, i_hat, horizon):
    return [sum(Fraction(v) for v in r[t : t + horizon]) - Fraction(i_hat) for t in range(len(r) - horizon)]


def test_q_hat_matches_prefix_oracle_on_1000_sequences():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        horizon = int(rng.integers(1, n))
        # dyadic rationals keep every float sum exact, so equality is exact
        r = rng.integers(-2**20, 2**20, n) / 2.0**10
        i_hat = float(rng.integers(-2**20, 2**20)) / 2.0**10
        oracle = _naive_q(r, i_hat, horizon)
        fast = q_hat_all(r, i_hat, horizon)
        assert len(fast) == n - horizon
        for t, exact in enumerate(oracle):
            assert fast[t] == float(exact)
            assert q_hat(r, i_hat, t, horizon) == float(exact)


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.floats(-50, 50, allow_nan=False), min_size=2, max_size=80),
    st.floats(-5, 5, allow_nan=False),
    st.data(),
)
def test_q_hat_general_floats_close_to_exact(r, i_hat, data):
    horizon = data.draw(st.integers(1, len(r) - 1))
    r = np.array(r)
    fast = q_hat_all(r, i_hat, horizon)
    for t, exact in enumerate(_naive_q(r, i_hat, horizon)):
        assert abs(fast[t] - float(exact)) <= 1e-10


def test_per_step_baseline_variant():
    r = np.random.default_rng(3).normal(size=40)
    once = q_hat_all(r, 0.3, 6)
    per = q_hat_all(r, 0.3, 6, per_step=True)
    assert np.allclose(per, once - 5 * 0.3)
    assert np.allclose(per, [sum(r[t : t + 6] - 0.3) for t in range(34)])
    with pytest.raises(ValueError):
        PolicyGradConfig(baseline="learned")


def test_q_hat_all_with_lane_axis():
    r = np.random.default_rng(0).normal(size=(30, 4))
    q = q_hat_all(r, 0.3, 5)
    for lane in range(4):
        assert np.allclose(q[:, lane], q_hat_all(r[:, lane], 0.3, 5))


# policy objective ---------------------------------------------------------


def test_zero_q_gives_zero_objective_and_gradient():
    gen = scrambled_generator(True, seed=2)
    rng = np.random.default_rng(0)
    xp, yp, x = (rng.integers(0, 2, (12, 2)) for _ in range(3))
    horizon = 3
    i_hat = 0.0
    r = np.zeros((12, 2))
    with ad.Tape() as tape:
        logp = ad.gather(ad.log_softmax(gen.logits_sequence(xp, yp, gen.zero_state(2))), x)
        j = policy_objective(logp, r, i_hat, horizon)
    assert j.item() == 0.0
    g = ad.backward(tape, j, gen.params)
    assert all(np.all(v == 0) for v in g.values())


def test_deterministic_policy_objective_zero():
    logp = ad.parameter(np.zeros(20))
    r = np.random.default_rng(1).normal(size=20)
    assert policy_objective(logp, r, 0.4, 5).item() == 0.0


def test_five_step_hand_calculation():
    # memoryless two-symbol toy: p = (0.25, 0.75), T = 1, n = 6 (five terms)
    p = np.array([0.25, 0.75])
    x = np.array([0, 1, 1, 0, 1, 0])
    r = np.array([1.0, 0.5, -0.25, 2.0, 0.0, 9.0])
    i_hat = 0.5
    logp = ad.parameter(np.log(p[x]))
    # Q_t = r_t - 0.5 = (0.5, 0, -0.75, 1.5, -0.5)
    expected = (
        0.5 * math.log(0.25) + 0.0 * math.log(0.75) - 0.75 * math.log(0.75) + 1.5 * math.log(0.25) - 0.5 * math.log(0.75)
    ) / 5
    assert abs(policy_objective(logp, r, i_hat, 1).item() - expected) <= 1e-12
    with pytest.raises(ValueError):
        policy_objective(ad.parameter(np.zeros(3)), np.zeros(3), 0.0, 3)


# Lemma 1 ---------------------------------------------------------------------


def test_lemma1_examples():
    phi = np.array([0.3, -0.2, 1.1])
    x = np.array([0, 2, 2, 1])
    assert np.all(mi_policy_gradient(x, np.full(4, 0.7), 0.7, phi) == 0)
    phi = np.array([0.4, -0.4])
    p = softmax_pmf(phi)
    g, i_hat = 1.3, 0.2
    got = mi_policy_gradient(np.array([0]), np.array([g]), i_hat, phi)
    assert np.allclose(got, np.array([1 - p[0], -p[1]]) * (g - i_hat), rtol=0, atol=1e-15)


def test_lemma1_matches_autodiff_on_100_batches():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        m = int(rng.integers(2, 9))
        n = int(rng.integers(1, 300))
        phi = rng.normal(size=m) * 2
        x = rng.integers(0, m, n)
        g = rng.normal(size=n)
        i_hat = float(rng.normal())
        closed = mi_policy_gradient(x, g, i_hat, phi)
        phi_t = ad.parameter(phi)
        with ad.Tape() as tape:
            j = mine_policy_objective(phi_t, x, g, i_hat)
        auto = ad.backward(tape, j, [phi_t])[phi_t]
        worst = max(worst, np.linalg.norm(closed - auto) / max(np.linalg.norm(auto), 1e-300))
    assert worst <= 1e-10


# training ---------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        PolicyGradConfig(horizon=30, seg_len=50)
    with pytest.raises(ValueError):
        PolicyGradConfig(horizon=0)
    with pytest.raises(ValueError):
        PolicyGradConfig(ratio=0)
    PolicyGradConfig(horizon=25, seg_len=50)
    with pytest.raises(ValueError):
        PolicyGradConfig(refit_iters=-1)
    with pytest.raises(ValueError):
        MiTrainConfig(batch=1)


def _tiny(**kw):
    base = dict(
        iterations=50, lanes=8, seg_len=20, horizon=5, dine_hidden=8, dine_fc=(8,),
        gen_hidden=8, gen_fc=(8,), eval_len=10_000, eval_lanes=10, plateau_tol=0.0,
    )
    base.update(kw)
    return PolicyGradConfig(**base)


def test_explore_schedule():
    fixed = PolicyGradConfig(iterations=11, explore_eps=0.05)
    assert {explore_schedule(fixed, it) for it in range(1, 12)} == {0.05}
    ramp = PolicyGradConfig(iterations=11, explore_eps=0.05, explore_eps_final=0.0)
    vals = [explore_schedule(ramp, it) for it in range(1, 12)]
    assert vals[0] == 0.05 and vals[-1] == 0.0 and vals[5] == pytest.approx(0.025)
    assert np.all(np.diff(vals) < 0)
    with pytest.raises(ValueError):
        PolicyGradConfig(explore_eps_final=1.0)


def test_refit_touches_dine_only():
    plain = train_di(ChannelSpec.trapdoor(), _tiny(iterations=10), feedback=True, seed=8)
    refit = train_di(ChannelSpec.trapdoor(), _tiny(iterations=10, refit_iters=5), feedback=True, seed=8)
    assert plain.curve == refit.curve
    for p, q in zip(plain.generator.params, refit.generator.params):
        assert np.array_equal(p.value, q.value)
    assert any(not np.array_equal(p.value, q.value) for p, q in zip(plain.dine.params, refit.dine.params))


def test_fifty_iteration_run_is_bit_deterministic():
    a = train_di(ChannelSpec.ising(), _tiny(), feedback=True, seed=42)
    b = train_di(ChannelSpec.ising(), _tiny(), feedback=True, seed=42)
    assert a.status == b.status == "ok"
    assert a.curve == b.curve
    for p, q in zip(a.generator.params + a.dine.params, b.generator.params + b.dine.params):
        assert np.array_equal(p.value, q.value)
    assert a.report.di == b.report.di
    c = train_di(ChannelSpec.ising(), _tiny(), feedback=True, seed=43)
    assert c.curve != a.curve


def test_training_keeps_pmfs_on_simplex():
    res = train_di(ChannelSpec.trapdoor(), _tiny(iterations=30), feedback=True, seed=1)
    tr = generator_trajectory(ChannelSpec.trapdoor(), res.generator, 1000, seed=0, lanes=2)
    assert np.all(tr.pmf >= 0) and np.all(np.abs(tr.pmf.sum(-1) - 1) <= 1e-9)
    assert len(res.curve) == 30 and set(res.curve[0]) == {"iter", "d_y_bits", "d_xy_bits", "di_bits"}


def test_gradient_isolation_is_enforced(rng):
    gen = PmfGenerator(2, 2, True, rng, hidden=4, fc=(4,))
    foreign = ad.parameter(np.ones(2), "foreign")
    with ad.Tape() as tape:
        logits = gen.logits_sequence(np.zeros((3, 2), int), np.zeros((3, 2), int), gen.zero_state(2))
        root = ad.add(ad.sum_(logits), ad.sum_(foreign))
    with pytest.raises(TrainingError):
        _ascent_grads(root, tape, gen.params, "policy")
    with ad.Tape() as tape:
        root = ad.sum_(gen.logits_sequence(np.zeros((3, 2), int), np.zeros((3, 2), int), gen.zero_state(2)))
    grads = _ascent_grads(root, tape, gen.params, "policy")
    assert set(grads) == set(gen.params)


def test_divergence_returns_diagnostic(monkeypatch):
    import dicap.policy as pol

    real = pol._DineTrainer.score
    calls = {"n": 0}

    def poisoned(self, seg):
        out, s_y, s_xy, warm = real(self, seg)
        calls["n"] += 1
        return out, s_y, (float("nan") if calls["n"] >= 3 else s_xy), warm

    monkeypatch.setattr(pol._DineTrainer, "score", poisoned)
    res = train_di(ChannelSpec.bsc(0.1), _tiny(iterations=10), feedback=False, seed=0)
    assert res.status == "failed" and res.stopped == "diverged"
    assert res.diagnostic["iteration"] == 3 and len(res.curve) == 2
    assert res.report is None


def test_mine_ascent_sanity_bsc02():
    """Exact MI of the iterate never drops over a 50-iteration window after
    warm-up, up to a 2e-3 bit noise floor at the optimum."""
    spec = ChannelSpec.bsc(0.2)
    ok = 0
    for seed in range(10):
        cfg = MiTrainConfig(batch=1000, iterations=200, critic_fc=(32,), plateau_tol=0.0, eval_n=20_000)
        res = train_mi(spec, cfg, seed=seed, phi0=np.array([1.5, -1.5]))
        e = np.array([row["exact_mi_bits"] for row in res.curve])
        warm = 20
        ok += bool(np.all(e[warm + 50 :] >= e[warm:-50] - 2e-3))
    assert ok >= 9


@pytest.fixture(scope="module")
def z_run():
    cfg = MiTrainConfig(batch=1000, iterations=400, critic_fc=(32,), plateau_tol=0.0)
    return train_mi(ChannelSpec.z_channel(0.5), cfg, seed=0)


def test_information_density_average_equals_mi(z_run):
    spec = ChannelSpec.z_channel(0.5)
    law = output_law(spec)[0]
    pmf = z_run.pmf
    rng = np.random.default_rng(0)
    n = 400_000
    x = rng.choice(2, size=n, p=pmf)
    y = (rng.random(n) < law[x, 1]).astype(int)
    dens = np.log2(law[x, y] / (pmf @ law)[y])
    se = dens.std() / math.sqrt(n)
    assert abs(dens.mean() - mutual_information(law, pmf)) <= 4 * se
    assert mutual_information(law, pmf) <= z_capacity(0.5) + 1e-12


def test_mine_route_z_channel(z_run):
    assert z_run.status == "ok"
    assert abs(z_run.pmf[1] - 0.4) <= 0.05
    assert abs(z_run.report.mi - 0.322) <= 0.03
    assert np.allclose(z_run.pmf, softmax_pmf(z_run.phi))


def test_train_mi_rejects_channels_with_memory():
    with pytest.raises(ValueError):
        train_mi(ChannelSpec.ising(), MiTrainConfig(iterations=1))


# clustering -------------------------------------------------------------------


def test_cluster_constant_pmf():
    tr = sample_trajectory(ChannelSpec.ising(), FixedPolicy([0.3, 0.7]), 200, False, np.random.default_rng(0))
    cl = cluster_learned_pmf(tr, 1)
    assert np.allclose(cl.centroids, [[0.3, 0.7]]) and cl.inertia == pytest.approx(0.0, abs=1e-20)
    with pytest.raises(ValueError):
        cluster_learned_pmf(tr, 2)


class _Alternating:
    def reset(self, batch):
        self.t = 0

    def step(self, x_prev, y_prev):
        self.t += 1
        p = [0.2, 0.8] if self.t % 2 else [0.9, 0.1]
        return np.tile(p, (len(x_prev), 1))


def test_cluster_two_alternating_pmfs():
    tr = sample_trajectory(ChannelSpec.ising(), _Alternating(), 400, False, np.random.default_rng(1))
    cl = cluster_learned_pmf(tr, 2)
    assert cl.inertia == pytest.approx(0.0, abs=1e-20)
    assert np.all(cl.labels[::2] == cl.labels[0]) and np.all(cl.labels[1::2] != cl.labels[0])
    assert cl.purity() == 1.0
    assert all(v != key[0] for key, v in cl.modal_table().items())
