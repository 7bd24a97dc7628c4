import numpy as np
import pytest

from diffmoe import tensor as T
from diffmoe.clustering import (
    AlignmentMatrix,
    best_partition,
    build_alignment,
    default_grid,
    partition_objective,
    per_timestep_gradient,
)
from diffmoe.diffusion import denoise_loss, interval_loss, make_schedule
from diffmoe.optim import AdamW
from diffmoe.rng import Rng
from diffmoe.tensor import Parameter, Tape, Tensor, backward
from diffmoe.unet import ModelConfig, build_model

from util import gradcheck


class MicroModel:
    """Three-parameter denoiser: eps_hat = a*x + b*1 + c*x^2."""

    def __init__(self):
        self.a = Parameter(np.array(0.4), "a")
        self.b = Parameter(np.array(-0.2), "b")
        self.c = Parameter(np.array(0.1), "c")

    def parameters(self):
        return [self.a, self.b, self.c]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def forward(self, x, t, cond=None, masks=None):
        x = T.as_tensor(x)
        ones = Tensor(np.ones_like(x.data))
        return T.add(T.add(T.smul(x, self.a), T.smul(ones, self.b)),
                     T.smul(T.square(x), self.c))


def _block_matrix(n, split, within=1.0, cross=0.0):
    s = np.full((n, n), cross)
    s[:split, :split] = within
    s[split:, split:] = within
    np.fill_diagonal(s, 1.0)
    return AlignmentMatrix(grid=np.arange(1, n + 1), scores=s, timesteps=n)


def test_gradient_probe_determinism_and_length():
    cfg = ModelConfig(stage_channels=(4, 8), layers_per_stage=1,
                      attention_stages=(), heads=2, signal_length=8,
                      time_embed_dim=8)
    model = build_model(cfg, Rng(0))
    sched = make_schedule(10, 0.02, 0.3)
    batch = Rng(1).normal((4, 1, 8))
    g1 = per_timestep_gradient(model, batch, 3, sched, Rng(2))
    g2 = per_timestep_gradient(model, batch, 3, sched, Rng(2))
    assert np.array_equal(g1, g2)
    assert g1.shape == (model.param_count(),)
    with pytest.raises(ValueError):
        per_timestep_gradient(model, batch, 0, sched, Rng(2))


def test_gradient_probe_matches_finite_differences():
    model = MicroModel()
    sched = make_schedule(10, 0.02, 0.3)
    batch = Rng(3).normal((4, 1, 3))
    eps = Rng(4).normal(batch.shape)
    tvec = np.full(4, 6)

    def loss():
        return denoise_loss(model, batch, tvec, eps, sched)

    gradcheck(loss, model.parameters())


def test_alignment_matrix_basic_properties():
    cfg = ModelConfig(stage_channels=(4, 8), layers_per_stage=1,
                      attention_stages=(), heads=2, signal_length=8,
                      time_embed_dim=8)
    model = build_model(cfg, Rng(5))
    model.out_w.data[...] = 0.05 * Rng(6).normal(model.out_w.data.shape)
    sched = make_schedule(12, 0.02, 0.3)
    data = Rng(7).normal((64, 1, 8))
    m = build_alignment(model, data, np.arange(1, 13), 16, sched, seed=11)
    m.validate()
    assert np.array_equal(m.scores, m.scores.T)
    assert np.abs(np.diag(m.scores) - 1.0).max() <= 1e-12
    assert m.scores.min() >= -1.0 and m.scores.max() <= 1.0
    assert m.batch_size == 16

    m2 = build_alignment(model, data, np.arange(1, 13), 16, sched, seed=11)
    assert np.array_equal(m.scores, m2.scores)


def test_degenerate_gradients_are_excluded():
    class DeadModel:
        def __init__(self):
            self.p = Parameter(np.array(1.0), "unused")

        def parameters(self):
            return [self.p]

        def zero_grad(self):
            self.p.zero_grad()

        def forward(self, x, t, cond=None, masks=None):
            return Tensor(np.zeros_like(x.data))

    sched = make_schedule(5, 0.05, 0.4)
    data = Rng(8).normal((8, 1, 4))
    with pytest.raises(ValueError):
        build_alignment(DeadModel(), data, [1, 2, 3], 4, sched, seed=0)


def test_objective_single_cluster_is_global_mean():
    rng = Rng(9)
    n = 12
    raw = rng.normal((n, n))
    s = (raw + raw.T) / 2
    np.fill_diagonal(s, 1.0)
    s = np.clip(s, -1, 1)
    m = AlignmentMatrix(grid=np.arange(1, n + 1), scores=s, timesteps=n)
    assert partition_objective(m, []) == pytest.approx(s.mean(), abs=1e-12)


def test_objective_block_matrix_oracle():
    m = _block_matrix(10, 7)
    j_star = partition_objective(m, [7])
    assert j_star == 1.0
    for c in range(1, 10):
        if c == 7:
            continue
        assert partition_objective(m, [c]) < j_star

    part, best_j, scan = best_partition(m, 2)
    assert best_j == 1.0
    assert part.cuts == [7]
    assert len(scan) == 9


def test_objective_all_ones_ties_break_earliest():
    n = 8
    m = AlignmentMatrix(grid=np.arange(1, n + 1), scores=np.ones((n, n)), timesteps=n)
    for c in range(1, n):
        assert partition_objective(m, [c]) == 1.0
    part, best_j, _ = best_partition(m, 2)
    assert best_j == 1.0
    assert part.cuts == [1]  # earliest cut vector wins ties


def test_every_point_own_cluster():
    m = _block_matrix(6, 4, within=0.3)
    part, j, _ = best_partition(m, 6)
    assert j == 1.0
    assert part.intervals == tuple((i, i) for i in range(1, 7))


def test_objective_empty_cluster_and_range_errors():
    m = _block_matrix(6, 3)
    with pytest.raises(ValueError):
        partition_objective(m, [2, 2])
    with pytest.raises(ValueError):
        partition_objective(m, [0])
    with pytest.raises(ValueError):
        partition_objective(m, [6])
    with pytest.raises(ValueError):
        best_partition(m, 7)


def test_weighting_blocks_degenerate_singletons():
    # balanced two-block structure with within mean > 0.5: the true split
    # must beat carving out any single point
    n = 10
    m = _block_matrix(n, 5, within=0.8)
    j_true = partition_objective(m, [5])
    assert j_true > 0.5
    assert partition_objective(m, [1]) < j_true
    assert partition_objective(m, [n - 1]) < j_true
    part, _, _ = best_partition(m, 2)
    assert part.cuts == [5]


def test_objective_invariant_under_consistent_reindex():
    rng = Rng(10)
    n = 9
    raw = rng.normal((n, n))
    s = np.clip((raw + raw.T) / 2, -1, 1)
    np.fill_diagonal(s, 1.0)
    m = AlignmentMatrix(grid=np.arange(1, n + 1), scores=s, timesteps=n)
    rev = AlignmentMatrix(grid=np.arange(1, n + 1), scores=s[::-1, ::-1].copy(), timesteps=n)
    for c in range(1, n):
        assert partition_objective(m, [c]) == pytest.approx(
            partition_objective(rev, [n - c]), abs=1e-12
        )


def test_default_grid():
    assert np.array_equal(default_grid(100), np.arange(1, 101))
    g = default_grid(1000)
    assert g[0] == 1 and g[-1] == 1000 and len(g) <= 201


def test_adjacent_timesteps_more_aligned_on_trained_model():
    # banded structure: neighbours in t align better than distant pairs
    cfg = ModelConfig(stage_channels=(4, 8), layers_per_stage=1,
                      attention_stages=(), heads=2, signal_length=16,
                      time_embed_dim=8)
    sched = make_schedule(20, 0.01, 0.35)
    dr = Rng(11)
    n = 256
    pos = np.arange(16)
    freq = dr.integers(1, 4, (n,))
    phase = dr.uniform((n,)) * 2 * np.pi
    data = np.sin(2 * np.pi * freq[:, None] * pos[None, :] / 16 + phase[:, None])[:, None, :]
    data = (data - data.mean()) / data.std()

    model = build_model(cfg, Rng(12))
    opt = AdamW(model.parameters(), lr=1e-3)
    rng = Rng(13)
    for _ in range(300):
        idx = rng.choice(n, 16)
        opt.zero_grad()
        with Tape():
            backward(interval_loss(model, data[idx], (1, 20), sched, rng))
        opt.step()

    m = build_alignment(model, data, np.arange(1, 21), 64, sched, seed=14)
    near = np.mean([m.scores[i, i + 1] for i in range(19)])
    far = np.mean([m.scores[i, i + 10] for i in range(10)])
    assert near > far
