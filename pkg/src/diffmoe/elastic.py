"""Per-interval fine-tuning with elastic depth, then elastic width.

Depth and width sampling are never active in the same optimization step:
the depth phase keeps full width, the width phase keeps full depth. One
sub-network configuration is drawn per training batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule, interval_loss
from .errors import DivergenceError
from .optim import AdamW
from .rng import Rng
from .tensor import Tape, backward
from .unet import ExpertModel, SoftMasks, importance_sort


@dataclass
class ElasticConfig:
    depth_drop_p: float = 0.5
    depth_iters: int = 1000
    width_iters: int = 1000
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 64

    def validate(self):
        if not (0.0 <= self.depth_drop_p < 1.0):
            raise ValueError("depth_drop_p must be in [0, 1)")


def sample_depth_config(model: ExpertModel, p: float, rng: Rng) -> dict:
    """Drop each depth unit independently with probability p (mask 0)."""
    return {
        d.id: 0.0 if rng.uniform() < p else 1.0 for d in model.depth_units
    }


def width_mask_for_ratio(order: np.ndarray, r: float) -> np.ndarray:
    """Keep-all-but-suffix mask: drop the floor(W*r) least important units."""
    W = len(order)
    drop = int(np.floor(W * r))
    mask = np.ones(W)
    if drop > 0:
        mask[order[W - drop :]] = 0.0
    return mask


def sample_width_config(model: ExpertModel, rng: Rng) -> dict:
    """Per block: r ~ U[0,1), drop the floor(W*r) lowest-importance units.

    floor(W*r) <= W-1, so at least one unit always survives.
    """
    return {
        wb.id: width_mask_for_ratio(model.importance_order[wb.id], float(rng.uniform()))
        for wb in model.width_blocks
    }


def _draw_batch(data, labels, rng, batch_size):
    idx = rng.choice(data.shape[0], min(batch_size, data.shape[0]))
    return data[idx], (None if labels is None else labels[idx])


def _train_phase(model, interval, cfg: ElasticConfig, data, labels,
                 sched: NoiseSchedule, rng: Rng, iters: int, sample_masks,
                 phase: str):
    opt = AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    cfg_rng = rng.child((phase, "configs"))
    data_rng = rng.child((phase, "data"))
    losses = []
    initial = None
    for it in range(iters):
        batch, cond = _draw_batch(data, labels, data_rng, cfg.batch_size)
        masks = sample_masks(cfg_rng)
        opt.zero_grad()
        with Tape():
            loss = interval_loss(model, batch, interval, sched, data_rng,
                                 cond=cond, masks=masks)
            backward(loss)
        opt.step()
        val = float(loss.data)
        losses.append(val)
        if initial is None:
            initial = max(val, 1e-12)
        elif val > 10.0 * initial:
            raise DivergenceError(
                f"{phase} phase diverged at iter {it}: loss {val:.4g} "
                f"vs initial {initial:.4g}"
            )
    return losses


def elastic_depth_phase(model: ExpertModel, interval, cfg: ElasticConfig,
                        data, sched: NoiseSchedule, rng: Rng, labels=None):
    """Fine-tune on the interval while randomly dropping depth units.

    Trains in place; returns the per-iteration loss curve.
    """
    cfg.validate()

    def sample(r):
        return SoftMasks(depth=sample_depth_config(model, cfg.depth_drop_p, r))

    return _train_phase(model, interval, cfg, data, labels, sched, rng,
                        cfg.depth_iters, sample, "depth")


def elastic_width_phase(model: ExpertModel, interval, cfg: ElasticConfig,
                        data, sched: NoiseSchedule, rng: Rng, labels=None):
    """Fine-tune on the interval with random suffix width dropping.

    The importance order is computed once here and frozen for the phase;
    depth stays fully kept. Trains in place, returns the loss curve.
    """
    cfg.validate()
    importance_sort(model)

    def sample(r):
        return SoftMasks(width=sample_width_config(model, r))

    return _train_phase(model, interval, cfg, data, labels, sched, rng,
                        cfg.width_iters, sample, "width")


def finetune_plain(model, interval, cfg: ElasticConfig, data,
                   sched: NoiseSchedule, rng: Rng, labels=None, iters=None):
    """Ordinary interval fine-tuning (no elasticity); used by ablations and
    for fine-tuning materialized experts."""
    return _train_phase(model, interval, cfg, data, labels, sched, rng,
                        cfg.depth_iters if iters is None else iters,
                        lambda r: None, "plain")
