import numpy as np
import pytest

from diffmoe import tensor as T
from diffmoe.diffusion import (
    IntervalPartition,
    NoiseSchedule,
    ddim_step,
    ddim_timesteps,
    ddpm_loss,
    ddpm_step,
    denoise_loss,
    interval_loss,
    make_schedule,
    q_sample,
    sample_mixture,
)
from diffmoe.mlp import MLPConfig, MLPDenoiser
from diffmoe.rng import Rng
from diffmoe.tensor import Tensor

from util import gradcheck


class ZeroModel:
    """eps_hat == 0 everywhere."""

    def forward(self, x, t, cond=None, masks=None):
        return T.scale(T.as_tensor(x), 0.0)

    def predict(self, x, t, cond=None):
        return np.zeros_like(x)


class EchoModel:
    """Recovers the exact noise from x_t given the known clean batch."""

    def __init__(self, x0, sched):
        self.x0 = x0
        self.sched = sched

    def forward(self, x, t, cond=None, masks=None):
        ab = self.sched.alpha_bar[np.asarray(t) - 1].reshape(-1, 1, 1)
        eps = (x.data - np.sqrt(ab) * self.x0) / np.sqrt(1.0 - ab)
        return Tensor(eps)

    def predict(self, x, t, cond=None):
        return self.forward(Tensor(x), t).data


class RecordingModel(ZeroModel):
    def __init__(self):
        self.seen_t = []

    def forward(self, x, t, cond=None, masks=None):
        self.seen_t.append(np.asarray(t).copy())
        return super().forward(x, t, cond, masks)


# ---------------------------------------------------------------------------
# schedule


def test_schedule_constant_beta():
    s = make_schedule(2, 0.5, 0.5)
    assert np.allclose(s.alpha_bar, [0.5, 0.25])


def test_schedule_default_terminal_noise():
    s = make_schedule(100)
    assert s.alpha_bar[-1] < 0.05
    assert np.all(np.diff(s.alpha_bar) < 0)


def test_schedule_validation():
    with pytest.raises(ValueError):
        make_schedule(100, 0.3, 0.1)
    with pytest.raises(ValueError):
        make_schedule(1)
    with pytest.raises(ValueError):
        make_schedule(10, 0.0, 0.1)
    with pytest.warns(UserWarning):
        make_schedule(5, 1e-4, 2e-4)


def test_schedule_monotone_random():
    rng = Rng(0)
    for _ in range(20):
        b0 = 1e-4 + 0.01 * rng.uniform()
        b1 = b0 + 0.3 * rng.uniform()
        s = make_schedule(int(rng.integers(2, 200, ())), b0, min(b1, 0.99))
        assert np.all(np.diff(s.alpha_bar) < 0)


# ---------------------------------------------------------------------------
# q_sample


def test_q_sample_limits():
    x0 = Rng(1).normal((2, 1, 4))
    eps = Rng(2).normal((2, 1, 4))
    ones = NoiseSchedule(T=2, beta=np.zeros(2), alpha=np.ones(2), alpha_bar=np.array([1.0, 1.0]))
    assert np.array_equal(q_sample(x0, 1, eps, ones), x0)
    dead = NoiseSchedule(T=2, beta=np.ones(2), alpha=np.zeros(2), alpha_bar=np.array([0.0, 0.0]))
    assert np.array_equal(q_sample(x0, 2, eps, dead), eps)
    with pytest.raises(ValueError):
        q_sample(x0, 3, eps, ones)


def test_q_sample_marginal_variance():
    sched = make_schedule(100)
    rng = Rng(3)
    n = 10000
    for t in (10, 50, 100):
        eps = rng.normal((n, 4))
        xt = q_sample(np.zeros((n, 4)), t, eps, sched)
        target = 1.0 - sched.alpha_bar[t - 1]
        var = xt.var(axis=0)
        se = target * np.sqrt(2.0 / (n - 1))
        assert np.all(np.abs(var - target) < 3 * se)


# ---------------------------------------------------------------------------
# losses


def test_loss_echo_model_is_zero():
    sched = make_schedule(50)
    x0 = Rng(4).normal((6, 1, 8))
    loss = ddpm_loss(EchoModel(x0, sched), x0, sched, Rng(5))
    assert abs(float(loss.data)) < 1e-18


def test_loss_zero_model_matches_dimension():
    sched = make_schedule(50)
    rng = Rng(6)
    B, dim = 4096, 8
    x0 = np.zeros((B, 1, dim))
    loss = float(ddpm_loss(ZeroModel(), x0, sched, rng).data)
    se = np.sqrt(2.0 * dim / B)
    assert abs(loss - dim) < 3 * se


def test_loss_gradient_matches_finite_differences():
    model = MLPDenoiser(MLPConfig(dim=2, hidden=6, time_embed_dim=4), Rng(7))
    sched = make_schedule(10, 0.02, 0.3)
    batch = Rng(8).normal((3, 1, 2))

    def loss():
        return ddpm_loss(model, batch, sched, Rng(9))

    gradcheck(loss, model.parameters())


def test_interval_loss_uses_only_its_interval():
    sched = make_schedule(20, 0.01, 0.3)
    model = RecordingModel()
    batch = Rng(10).normal((32, 1, 4))
    interval_loss(model, batch, (5, 5), sched, Rng(11))
    assert np.all(model.seen_t[-1] == 5)
    interval_loss(model, batch, (3, 9), sched, Rng(12))
    assert model.seen_t[-1].min() >= 3 and model.seen_t[-1].max() <= 9
    with pytest.raises(ValueError):
        interval_loss(model, batch, (0, 5), sched, Rng(13))
    with pytest.raises(ValueError):
        interval_loss(model, np.zeros((0, 1, 4)), (1, 5), sched, Rng(13))


class LinearModel:
    """eps_hat = c * x_t; loss has a closed t-dependence, good for MC checks."""

    def __init__(self, c):
        self.c = c

    def forward(self, x, t, cond=None, masks=None):
        return T.scale(T.as_tensor(x), self.c)

    def predict(self, x, t, cond=None):
        return self.c * x


def test_weighted_interval_losses_match_global():
    sched = make_schedule(10, 0.05, 0.4)
    model = LinearModel(0.7)
    rng = Rng(14)
    data = rng.normal((512, 1, 4))

    def mc(interval, seed, reps=60):
        vals = [
            float(interval_loss(model, data, interval, sched, Rng(seed + i)).data)
            for i in range(reps)
        ]
        return np.mean(vals), np.std(vals) / np.sqrt(len(vals))

    g_mean, g_se = mc((1, 10), 100)
    a_mean, a_se = mc((1, 6), 200)
    b_mean, b_se = mc((7, 10), 300)
    combined = 0.6 * a_mean + 0.4 * b_mean
    se = np.sqrt(g_se ** 2 + (0.6 * a_se) ** 2 + (0.4 * b_se) ** 2)
    assert abs(combined - g_mean) < 3 * se


# ---------------------------------------------------------------------------
# samplers


def test_ddpm_step_no_noise_at_t1():
    sched = make_schedule(10, 0.05, 0.4)
    x = Rng(15).normal((2, 1, 4))
    out1 = ddpm_step(ZeroModel(), x, 1, sched, Rng(1))
    out2 = ddpm_step(ZeroModel(), x, 1, sched, Rng(999))
    assert np.array_equal(out1, out2)  # rng unused at t=1
    mean = x / np.sqrt(sched.alpha[0])
    assert np.allclose(out1, mean)


def test_ddpm_step_small_beta_is_identity_limit():
    sched = make_schedule(5, 1e-9, 1e-8)
    x = Rng(16).normal((2, 1, 4))
    out = ddpm_step(ZeroModel(), x, 1, sched, Rng(17))
    assert np.allclose(out, x, atol=1e-7)


def test_ddpm_step_mean_matches_posterior_formula():
    sched = make_schedule(10, 0.05, 0.4)
    model = LinearModel(0.3)
    x = Rng(18).normal((1, 1, 4))
    t = 5
    beta = sched.beta[t - 1]
    expected = (x - beta / np.sqrt(1 - sched.alpha_bar[t - 1]) * model.predict(x, t)) / np.sqrt(
        sched.alpha[t - 1]
    )
    n = 5000
    rng = Rng(19)
    acc = np.zeros_like(x)
    for _ in range(n):
        acc += ddpm_step(model, x, t, sched, rng)
    mc_mean = acc / n
    se = np.sqrt(beta / n)
    assert np.all(np.abs(mc_mean - expected) < 4 * se)


def test_ddim_step_identity_and_exact_recovery():
    sched = make_schedule(20, 0.01, 0.3)
    x = Rng(20).normal((2, 1, 4))
    assert np.allclose(ddim_step(ZeroModel(), x, 7, 7, sched), x)

    # a model that returns the exact eps reproduces the closed form
    x0 = Rng(21).normal((2, 1, 4))
    eps = Rng(22).normal((2, 1, 4))
    t, tp = 15, 6
    xt = q_sample(x0, t, eps, sched)

    class PerfectEps:
        def predict(self, x, tt, cond=None):
            return eps

    out = ddim_step(PerfectEps(), xt, t, tp, sched)
    ab = sched.alpha_bar[tp - 1]
    assert np.allclose(out, np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps, atol=1e-12)

    with pytest.raises(ValueError):
        ddim_step(ZeroModel(), x, 5, 9, sched)


def test_ddim_trajectory_matches_reference_reimplementation():
    sched = make_schedule(50, 0.005, 0.25)
    model = LinearModel(0.4)
    x = Rng(23).normal((3, 1, 4))
    part = IntervalPartition(timesteps=50, intervals=((1, 50),))
    got, _ = sample_mixture([model], part, "ddim", 10, 3, (1, 4), sched, Rng(24))

    # independent straight-line evaluation of the same update formulas
    rng = Rng(24)
    xt = rng.normal((3, 1, 4))
    ts = [50 - 5 * k for k in range(10)]
    for t, tp in zip(ts, ts[1:] + [0]):
        eps = model.predict(xt, t)
        ab_t = sched.alpha_bar[t - 1]
        ab_p = sched.alpha_bar[tp - 1] if tp >= 1 else 1.0
        x0 = (xt - np.sqrt(1 - ab_t) * eps) / np.sqrt(ab_t)
        xt = np.sqrt(ab_p) * x0 + np.sqrt(1 - ab_p) * eps
    assert np.array_equal(got, xt)


def test_ddim_full_steps_deterministic():
    sched = make_schedule(20, 0.01, 0.3)
    model = LinearModel(0.2)
    part = IntervalPartition(timesteps=20, intervals=((1, 20),))
    a, _ = sample_mixture([model], part, "ddim", 20, 2, (1, 4), sched, Rng(25))
    b, _ = sample_mixture([model], part, "ddim", 20, 2, (1, 4), sched, Rng(25))
    assert np.array_equal(a, b)


def test_mixture_dispatch_counts():
    # paper-style arithmetic: T=1000, cut at 700, 100 linear DDIM steps
    sched = NoiseSchedule(
        T=1000,
        beta=np.full(1000, 1e-4),
        alpha=1 - np.full(1000, 1e-4),
        alpha_bar=np.cumprod(1 - np.full(1000, 1e-4)),
    )
    part = IntervalPartition.from_cuts([700], 1000)
    experts = [LinearModel(0.1), LinearModel(0.2)]
    _, counts = sample_mixture(experts, part, "ddim", 100, 1, (1, 2), sched, Rng(26))
    assert counts == [70, 30]

    ts = ddim_timesteps(1000, 100)
    member = [sum(1 for t in ts if lo <= t <= hi) for lo, hi in part.intervals]
    assert counts == member
    assert sum(counts) == 100


def test_single_expert_equals_single_model():
    sched = make_schedule(10, 0.02, 0.3)
    model = LinearModel(0.3)
    part1 = IntervalPartition(timesteps=10, intervals=((1, 10),))
    part2 = IntervalPartition.from_cuts([6], 10)
    a, ca = sample_mixture([model], part1, "ddpm", 10, 4, (1, 4), sched, Rng(27))
    b, cb = sample_mixture([model, model], part2, "ddpm", 10, 4, (1, 4), sched, Rng(27))
    assert np.array_equal(a, b)  # same model both sides of the cut
    assert ca == [10] and cb == [6, 4]


def test_partition_validation():
    with pytest.raises(ValueError):
        IntervalPartition(timesteps=10, intervals=((1, 5), (7, 10)))  # gap
    with pytest.raises(ValueError):
        IntervalPartition(timesteps=10, intervals=((2, 10),))
    with pytest.raises(ValueError):
        IntervalPartition(timesteps=10, intervals=())
    p = IntervalPartition.from_cuts([3, 7], 10)
    assert p.intervals == ((1, 3), (4, 7), (8, 10))
    assert p.weights.sum() == pytest.approx(1.0)
    assert p.expert_for(4) == 1


def test_denoise_loss_empty_batch():
    sched = make_schedule(10, 0.02, 0.3)
    with pytest.raises(ValueError):
        denoise_loss(ZeroModel(), np.zeros((0, 1, 4)), np.zeros(0, dtype=int),
                     np.zeros((0, 1, 4)), sched)
