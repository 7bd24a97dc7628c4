"""Timestep clustering from gradient alignment.

A pretrained model's per-timestep loss gradients are probed on one shared
batch; pairwise cosine similarities form the alignment matrix, and interval
cut-points are chosen by exhaustive search over the weighted-mean objective
J = sum_i w_i * mean(scores within cluster i), w_i = |cluster i| / grid size.
The size weights block degenerate single-point clusters.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .diffusion import IntervalPartition, NoiseSchedule, denoise_loss
from .rng import Rng
from .tensor import Tape, backward


@dataclass
class AlignmentMatrix:
    grid: np.ndarray            # probed timesteps, sorted ascending
    scores: np.ndarray          # symmetric cosine matrix over the grid
    timesteps: int              # schedule length the grid was drawn from
    batch_size: int = 0
    seed: int = 0
    excluded: list = field(default_factory=list)  # degenerate (zero-grad) timesteps

    def validate(self):
        n = len(self.grid)
        if self.scores.shape != (n, n):
            raise ValueError("scores shape does not match grid")
        if np.abs(self.scores - self.scores.T).max() > 1e-12:
            raise ValueError("scores must be symmetric")
        if np.abs(np.diag(self.scores) - 1.0).max() > 1e-12:
            raise ValueError("diagonal must be 1")


def per_timestep_gradient(model, batch: np.ndarray, t: int, sched: NoiseSchedule,
                          noise_rng: Rng) -> np.ndarray:
    """Flat gradient of the fixed-t denoising loss over all parameters.

    Noise draws come from noise_rng, so identical (model, batch, t, seed)
    give identical vectors. Parameter order is the model's canonical order.
    """
    if not (1 <= t <= sched.T):
        raise ValueError(f"timestep {t} out of range")
    if batch.shape[0] == 0:
        raise ValueError("empty batch")
    model.zero_grad()
    tvec = np.full(batch.shape[0], t, dtype=np.int64)
    eps = noise_rng.normal(batch.shape)
    with Tape():
        loss = denoise_loss(model, batch, tvec, eps, sched)
        backward(loss)
    return np.concatenate([p.grad.ravel() for p in model.parameters()])


def build_alignment(model, data: np.ndarray, grid, batch_size: int,
                    sched: NoiseSchedule, seed: int) -> AlignmentMatrix:
    """Cosine-similarity matrix of per-timestep gradients on one shared batch.

    Zero-norm gradients are flagged and their timesteps dropped from the grid.
    """
    grid = np.asarray(sorted(set(int(t) for t in grid)), dtype=np.int64)
    if grid.size == 0:
        raise ValueError("empty probe grid")
    rng = Rng(seed)
    idx = rng.child("probe-batch").choice(data.shape[0], min(batch_size, data.shape[0]))
    batch = data[idx]

    vectors = []
    kept = []
    excluded = []
    for t in grid:
        g = per_timestep_gradient(model, batch, int(t), sched, rng.child(("probe-noise", int(t))))
        norm = np.linalg.norm(g)
        if norm == 0.0:
            excluded.append(int(t))
            continue
        vectors.append(g / norm)
        kept.append(int(t))
    if not kept:
        raise ValueError("all probe gradients were degenerate")

    U = np.stack(vectors)
    scores = U @ U.T
    # mirror the upper triangle so symmetry is exact, then pin the diagonal
    iu = np.triu_indices(len(kept), k=1)
    scores[(iu[1], iu[0])] = scores[iu]
    np.fill_diagonal(scores, 1.0)
    scores = np.clip(scores, -1.0, 1.0)
    return AlignmentMatrix(
        grid=np.asarray(kept, dtype=np.int64),
        scores=scores,
        timesteps=sched.T,
        batch_size=int(batch.shape[0]),
        seed=seed,
        excluded=excluded,
    )


def default_grid(timesteps: int, max_points: int = 200) -> np.ndarray:
    """Every timestep when T <= max_points, else strided subsampling."""
    if timesteps <= max_points:
        return np.arange(1, timesteps + 1, dtype=np.int64)
    stride = int(np.ceil(timesteps / max_points))
    grid = np.arange(1, timesteps + 1, stride, dtype=np.int64)
    if grid[-1] != timesteps:
        grid = np.append(grid, timesteps)
    return grid


def _boundary_objective(prefix: np.ndarray, n: int, bounds: tuple) -> float:
    """J for cluster boundaries, via a 2-D prefix-sum table.

    Computed as sum_i |I_i| * mean_i / n, which is exact for integer-valued
    block means.
    """
    total = 0.0
    for a, b in zip(bounds, bounds[1:]):
        size = b - a
        block = prefix[b, b] - prefix[a, b] - prefix[b, a] + prefix[a, a]
        total += block / size
    return total / n


def partition_objective(matrix: AlignmentMatrix, cuts) -> float:
    """Weighted mean of within-cluster mean alignment for grid-index cuts.

    `cuts` are grid positions: cluster i spans grid indices [c_{i-1}, c_i).
    """
    n = len(matrix.grid)
    cuts = [int(c) for c in cuts]
    bounds = (0, *cuts, n)
    for a, b in zip(bounds, bounds[1:]):
        if b <= a:
            raise ValueError(f"empty cluster in cut positions {cuts}")
    if any(not (0 < c < n) for c in cuts):
        raise ValueError(f"cut positions {cuts} outside grid range (0, {n})")
    prefix = np.zeros((n + 1, n + 1))
    prefix[1:, 1:] = matrix.scores.cumsum(axis=0).cumsum(axis=1)
    return _boundary_objective(prefix, n, bounds)


def best_partition(matrix: AlignmentMatrix, num_clusters: int):
    """Exhaustive search over all cut combinations; ties break to the
    lexicographically earliest cut vector.

    Returns (IntervalPartition over [1, T], best J, scan) where scan lists
    (cut positions, J) for every candidate (useful for reports when C=1).
    """
    n = len(matrix.grid)
    C = num_clusters - 1
    if num_clusters < 1 or num_clusters > n:
        raise ValueError(f"cannot form {num_clusters} clusters from {n} grid points")
    prefix = np.zeros((n + 1, n + 1))
    prefix[1:, 1:] = matrix.scores.cumsum(axis=0).cumsum(axis=1)

    best_cuts = ()
    best_j = -np.inf
    scan = []
    for cuts in itertools.combinations(range(1, n), C):
        j = _boundary_objective(prefix, n, (0, *cuts, n))
        scan.append((cuts, j))
        if j > best_j:
            best_j = j
            best_cuts = cuts

    cut_ts = [int(matrix.grid[c - 1]) for c in best_cuts]
    partition = IntervalPartition.from_cuts(cut_ts, matrix.timesteps)
    return partition, best_j, scan
