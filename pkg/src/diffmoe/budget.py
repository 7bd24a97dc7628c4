"""Differentiable MACs budgeting and the agent pruning loop.

Soft masks turn into MACs through straight-through rounding: the forward
pass counts the exactly-rounded architecture while gradients pass through
unchanged. The budget objective is the mean per-interval denoising loss of
the soft-masked experts plus log(max(That, Td)/min(That, Td)).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import era as era_mod
from . import tensor as T
from .diffusion import IntervalPartition, NoiseSchedule, interval_loss
from .errors import DivergenceError
from .optim import AdamW
from .rng import Rng
from .tensor import Tensor, ste_round
from .unet import MacsTable, SoftMasks


@dataclass
class BudgetConfig:
    target: float                # fraction of full-model MACs (<=1) or absolute
    iters: int = 500
    tau: float = 0.4
    lr: float = 1e-3
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    batch_size: int = 16
    loss_coeff: float = 1.0      # 0 zeroes the denoising term (budget-only run)

    def validate(self):
        if self.target <= 0:
            raise ValueError("target must be positive")
        if self.iters < 0:
            raise ValueError("iters must be >= 0")
        if self.tau <= 0:
            raise ValueError("tau must be positive")


def resolve_target(cfg: BudgetConfig, full_macs: int) -> float:
    """Fractional targets are relative to the full pretrained model."""
    td = cfg.target * full_macs if cfg.target <= 1.0 else cfg.target
    if td > full_macs:
        raise ValueError(f"target {td} exceeds full model MACs {full_macs}")
    return float(td)


def soft_layer_macs(v_soft, entry, round_fn=ste_round) -> Tensor:
    """Rounded kept-unit count times the per-unit MACs slope."""
    v = T.as_tensor(v_soft)
    if v.data.shape != (entry.units,):
        raise ValueError(
            f"mask length {v.data.shape} does not match entry '{entry.block_id}'"
        )
    kept = T.tsum(round_fn(v))
    return T.scale(kept, float(entry.slope))


def soft_depth_macs(u_soft, width_terms, fixed: int, round_fn=ste_round) -> Tensor:
    """A dropped depth layer contributes zero MACs regardless of width."""
    inner = None
    for term in width_terms:
        inner = term if inner is None else T.add(inner, term)
    inner = T.add_const(inner, float(fixed)) if inner is not None else Tensor(np.array(float(fixed)))
    return T.smul(inner, round_fn(T.as_tensor(u_soft)))


def expert_soft_macs(masks: SoftMasks, table: MacsTable, round_fn=ste_round) -> Tensor:
    """Total differentiable MACs of one soft-masked expert."""
    total = Tensor(np.array(float(table.fixed)))
    by_owner: dict = {}
    for entry in table.width:
        mask = masks.width.get(entry.block_id)
        if mask is None:
            mask = np.ones(entry.units)
        term = soft_layer_macs(mask, entry, round_fn)
        if entry.owner is None:
            total = T.add(total, term)
        else:
            by_owner.setdefault(entry.owner, []).append(term)
    for did, fixed in table.depth_fixed.items():
        u = masks.depth.get(did, 1.0)
        total = T.add(total, soft_depth_macs(u, by_owner.get(did, []), fixed, round_fn))
    return total


def mixture_macs(masks_list, tables, partition: IntervalPartition,
                 round_fn=ste_round) -> Tensor:
    """Interval-size weighted mean of expert MACs (linear denoising schedule)."""
    if len(masks_list) != len(tables) or len(tables) != len(partition.intervals):
        raise ValueError("need one mask set and one table per interval")
    weights = partition.weights
    total = None
    for w, masks, table in zip(weights, masks_list, tables):
        term = T.scale(expert_soft_macs(masks, table, round_fn), float(w))
        total = term if total is None else T.add(total, term)
    return total


def macs_regularizer(that: Tensor, td: float) -> Tensor:
    """log(max(That, Td) / min(That, Td)); zero iff the budget is met."""
    if td <= 0 or float(that.data) <= 0:
        raise ValueError("regularizer arguments must be positive")
    return T.abs_(T.add_const(T.log(that), -float(np.log(td))))


def pruning_objective(experts, state, batch, labels, partition, tables,
                      cfg: BudgetConfig, td_abs: float, sched: NoiseSchedule,
                      rng: Rng, make_masks=era_mod.make_soft_masks,
                      round_fn=ste_round):
    """Alg-style objective: soft masks -> interval losses + budget term.

    Only the agent's parameters are meant to train; expert weights stay
    frozen in the loop. Returns (J, diagnostics).
    """
    masks_list, logits = make_masks(state, experts, cfg.tau, rng)
    that = mixture_macs(masks_list, tables, partition, round_fn)
    reg = macs_regularizer(that, td_abs)
    info = {"that": float(that.data), "reg": float(reg.data), "losses": []}
    if cfg.loss_coeff == 0.0:
        return reg, info
    total_loss = None
    for expert, masks, interval in zip(experts, masks_list, partition.intervals):
        li = interval_loss(expert, batch, interval, sched, rng, cond=labels,
                           masks=masks)
        info["losses"].append(float(li.data))
        total_loss = li if total_loss is None else T.add(total_loss, li)
    j = T.add(T.scale(total_loss, cfg.loss_coeff / len(experts)), reg)
    return j, info


def _era_macs_only(state, tables, partition, cfg: BudgetConfig, td_abs: float,
                   rng: Rng):
    """Budget-only objective straight from the agent's rank-space head rows.

    The rounded kept count is permutation invariant, so the importance-order
    scatter is skipped; noise draw order matches make_soft_masks exactly, so
    this evaluates the same J as the general path at the same rng state.
    """
    from .era import _head_stacks, width_logits

    weights = partition.weights
    stacks = _head_stacks(state)
    kept, rounded = [], []
    for (c, keys), stack in zip(state.groups, stacks):
        v = width_logits(stack)
        noise = rng.gumbel((len(keys), 1)) - rng.gumbel((len(keys), 1))
        soft = T.sigmoid(T.scale(T.add_const(v, noise), 1.0 / cfg.tau))
        r = ste_round(soft)
        rounded.append(r)
        kept.append(T.sum_last(r))

    group_of = {}
    for gi, (c, keys) in enumerate(state.groups):
        for row, key in enumerate(keys):
            group_of[key] = (gi, row)
    rank_pos = {did: e for e, did in enumerate(state.depth_ranking)}
    entry_of = [{e.block_id: e for e in t.width} for t in tables]

    fixed = sum(w * t.fixed for w, t in zip(weights, tables))
    total = Tensor(np.array(float(fixed)))

    owned_g, owned_row, owned_coef, owned_uflat = [], [], [], []
    depth_c = len(state.depth_ids)
    for i in range(state.n_experts):
        dgi, drow = group_of[(i, "depth")]
        for bid in state.block_ids:
            gi, row = group_of[(i, bid)]
            e = entry_of[i][bid]
            if e.owner is None:
                continue
            owned_g.append(gi)
            owned_row.append(row)
            owned_coef.append(weights[i] * e.slope)
            owned_uflat.append((dgi, drow * depth_c + rank_pos[e.owner]))

    # free width rows: one coefficient vector per group
    for gi, (c, keys) in enumerate(state.groups):
        coef = np.zeros(len(keys))
        for row, (i, key) in enumerate(keys):
            if key == "depth":
                continue
            e = entry_of[i][key]
            if e.owner is None:
                coef[row] = weights[i] * e.slope
        if np.any(coef):
            total = T.add(total, T.tsum(T.mul(kept[gi], Tensor(coef))))

    if owned_g:
        by_group = {}
        for pos, gi in enumerate(owned_g):
            by_group.setdefault(gi, []).append(pos)
        parts, order = [], []
        for gi, positions in by_group.items():
            parts.append(T.take_elems(kept[gi], [owned_row[p] for p in positions]))
            order.extend(positions)
        kept_owned = T.concat(parts, axis=0) if len(parts) > 1 else parts[0]
        dgi = owned_uflat[0][0]
        flat_rounded = T.reshape(rounded[dgi], (-1,))
        u_owned = T.take_elems(flat_rounded, [owned_uflat[p][1] for p in order])
        coef = Tensor(np.array([owned_coef[p] for p in order]))
        total = T.add(total, T.tsum(T.mul(T.mul(kept_owned, u_owned), coef)))

    # per-layer fixed MACs gated by the depth decisions
    ufix_idx, ufix_coef = [], []
    for i in range(state.n_experts):
        dgi, drow = group_of[(i, "depth")]
        for did, fx in tables[i].depth_fixed.items():
            if fx:
                ufix_idx.append(drow * depth_c + rank_pos[did])
                ufix_coef.append(weights[i] * fx)
    if ufix_idx:
        dgi = group_of[(0, "depth")][0]
        flat_rounded = T.reshape(rounded[dgi], (-1,))
        ufix = T.take_elems(flat_rounded, ufix_idx)
        total = T.add(total, T.tsum(T.mul(ufix, Tensor(np.array(ufix_coef)))))

    reg = macs_regularizer(total, td_abs)
    return reg, {"that": float(total.data), "reg": float(reg.data), "losses": []}


def prune_train_loop(experts, state, data, labels, partition, tables,
                     cfg: BudgetConfig, sched: NoiseSchedule, rng: Rng,
                     make_masks=era_mod.make_soft_masks,
                     extract=era_mod.extract_architecture):
    """Train the agent for cfg.iters steps, then extract binary decisions.

    Returns (state, binary masks per expert, descriptor, history rows,
    budget_warning). History rows: (iter, J, That, mean expert loss).
    """
    cfg.validate()
    full = count_full(tables, partition)
    td_abs = resolve_target(cfg, full)
    opt = AdamW(state.parameters(), lr=cfg.lr, betas=cfg.betas,
                weight_decay=cfg.weight_decay)
    data_rng = rng.child("prune-data")
    noise_rng = rng.child("prune-noise")
    fast_macs_only = (
        cfg.loss_coeff == 0.0
        and make_masks is era_mod.make_soft_masks
        and isinstance(state, era_mod.ERAState)
    )
    history = []
    initial = None
    for it in range(cfg.iters):
        idx = data_rng.choice(data.shape[0], min(cfg.batch_size, data.shape[0]))
        batch = data[idx]
        cond = None if labels is None else labels[idx]
        opt.zero_grad()
        with T.Tape():
            if fast_macs_only:
                j, info = _era_macs_only(state, tables, partition, cfg, td_abs,
                                         noise_rng)
            else:
                j, info = pruning_objective(experts, state, batch, cond, partition,
                                            tables, cfg, td_abs, sched, noise_rng,
                                            make_masks)
            T.backward(j)
        opt.step()
        jval = float(j.data)
        mean_loss = float(np.mean(info["losses"])) if info["losses"] else 0.0
        history.append((it, jval, info["that"], mean_loss))
        if initial is None:
            initial = max(abs(jval), 1e-9)
        elif not np.isfinite(jval) or jval > 100.0 * initial:
            raise DivergenceError(f"pruning objective diverged at iter {it}: {jval}")

    binaries, descriptor = extract(state, experts, cfg.tau)
    kept = [
        {e.block_id: int(np.asarray(m.width[e.block_id]).sum()) for e in t.width}
        for m, t in zip(binaries, tables)
    ]
    on = [{d: bool(m.depth[d]) for d in t.depth_fixed}
          for m, t in zip(binaries, tables)]
    exact = sum(
        w * t.total(k, o)
        for w, t, k, o in zip(partition.weights, tables, kept, on)
    )
    descriptor["mixture_macs"] = float(exact)
    descriptor["target_macs"] = td_abs
    descriptor["full_macs"] = float(full)
    budget_warning = abs(exact - td_abs) / td_abs > 0.10
    return state, binaries, descriptor, history, budget_warning


def count_full(tables, partition) -> float:
    """Interval-weighted MACs of the unmasked mixture."""
    return float(sum(
        w * t.total({e.block_id: e.units for e in t.width},
                    {d: True for d in t.depth_fixed})
        for w, t in zip(partition.weights, tables)
    ))
