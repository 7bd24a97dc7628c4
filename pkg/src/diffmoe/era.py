"""Expert Routing Agent.

Fixed random inputs (one 128-vector per (expert, output head) pair) pass
through one shared weight-normalized GRU cell and per-head dense maps. Each
width head's outputs turn into keep logits by softmax -> tail-inclusive
cumulative sum -> inverse sigmoid, indexed along the block's importance
order; the depth head does the same along a fixed depth ranking. Keep
probabilities are therefore non-increasing in rank by construction.

Heads with equal output size are stored stacked and evaluated as one
batched matmul; the pruning loop runs every step, so the agent forward is
kept to a few dozen tape ops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Parameter, Tensor

LOGIT_EPS = 1e-4


def default_depth_ranking(model) -> list[str]:
    """Shallow stages first, decoder before encoder within a stage."""
    stages = sorted({d.stage for d in model.depth_units})
    ranking = []
    for s in stages:
        for branch in ("dec", "enc"):
            did = f"{branch}{s}"
            if any(d.id == did for d in model.depth_units):
                ranking.append(did)
    return ranking


class ERAState:
    """Agent parameters plus the fixed z inputs and head layout."""

    def __init__(self, models, rng: Rng, z_dim: int = 128, hidden: int = 256,
                 depth_ranking: list[str] | None = None):
        self.z_dim = z_dim
        self.hidden = hidden
        self.n_experts = len(models)
        template = models[0]
        self.block_ids = [wb.id for wb in template.width_blocks]
        for m in models[1:]:
            if [wb.id for wb in m.width_blocks] != self.block_ids:
                raise ValueError("experts disagree on width block structure")
        self.block_units = {wb.id: wb.units for wb in template.width_blocks}
        self.depth_ids = [d.id for d in template.depth_units]
        self.depth_ranking = list(depth_ranking or default_depth_ranking(template))
        if sorted(self.depth_ranking) != sorted(self.depth_ids):
            raise ValueError("depth ranking must be a permutation of the depth units")
        # rank position e -> index into the model's depth unit order
        self._rank_perm = np.array(
            [self.depth_ids.index(d) for d in self.depth_ranking], dtype=np.int64
        )

        self.head_keys = [(i, k) for i in range(self.n_experts)
                          for k in self.block_ids + ["depth"]]
        self._head_size = {
            (i, k): (len(self.depth_ids) if k == "depth" else self.block_units[k])
            for i, k in self.head_keys
        }
        # group heads of equal output size for batched evaluation
        self.groups: list[tuple[int, list]] = []
        seen = {}
        for key in self.head_keys:
            c = self._head_size[key]
            if c not in seen:
                seen[c] = len(self.groups)
                self.groups.append((c, []))
            self.groups[seen[c]][1].append(key)

        self._params: list[Parameter] = []

        def wn(name, rows, cols):
            v = Parameter(rng.normal((rows, cols)) / math.sqrt(cols), name=f"{name}.v")
            g = Parameter(np.sqrt((v.data ** 2).sum(axis=1)), name=f"{name}.g")
            b = Parameter(np.zeros(rows), name=f"{name}.b")
            self._params.extend([v, g, b])
            return v, g, b

        self.gru = {
            gate: (wn(f"gru.i{gate}", hidden, z_dim), wn(f"gru.h{gate}", hidden, hidden))
            for gate in ("r", "z", "n")
        }
        # one stacked weight-normed dense per size group: (n_heads*size, hidden)
        self.head_params = [
            wn(f"head.c{c}", len(keys) * c, hidden) for c, keys in self.groups
        ]

        zs = rng.normal((len(self.head_keys), z_dim))
        self.z = {key: zs[r].copy() for r, key in enumerate(self.head_keys)}

    def parameters(self) -> list[Parameter]:
        return self._params

    def zero_grad(self):
        for p in self._params:
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.data.size for p in self._params)

    def state_arrays(self) -> dict:
        out = {p.name: p.data.copy() for p in self._params}
        for (i, key), z in self.z.items():
            out[f"z.{i}.{key}"] = z.copy()
        return out

    def load_arrays(self, arrays: dict):
        for p in self._params:
            if p.data.shape != arrays[p.name].shape:
                raise ValueError(f"array {p.name} has wrong shape")
            p.data[...] = arrays[p.name]
        for (i, key) in self.head_keys:
            self.z[(i, key)][...] = arrays[f"z.{i}.{key}"]


def _wn_weight(vgb):
    v, g, b = vgb
    return T.weight_norm(v, g), b


def _trunk(state: ERAState) -> Tensor:
    """Shared single GRU step over all z rows, then ReLU: (n_heads, hidden).

    The initial hidden state is zero, so the hidden-to-hidden matmuls vanish
    identically and only their biases contribute; the U matrices stay in the
    parameter set with exactly-zero gradients.
    """
    X = Tensor(np.stack([state.z[k] for k in state.head_keys]))

    def gate(name):
        wi, bi = _wn_weight(state.gru[name][0])
        bh = state.gru[name][1][2]
        return T.add_bias(T.dense(X, wi, bi), bh)

    r = T.sigmoid(gate("r"))
    zg = T.sigmoid(gate("z"))
    wn_v, bn_i = _wn_weight(state.gru["n"][0])
    bh_n = state.gru["n"][1][2]
    n = T.tanh(T.add(T.dense(X, wn_v, bn_i), T.mask_channels(r, bh_n)))
    one_minus_z = T.add_const(T.neg(zg), 1.0)
    return T.relu(T.mul(one_minus_z, n))


def _head_stacks(state: ERAState) -> list[Tensor]:
    """Per size group, the stacked head outputs: (n_heads_in_group, size)."""
    h = _trunk(state)
    row_of = {key: r for r, key in enumerate(state.head_keys)}
    stacks = []
    for (c, keys), vgb in zip(state.groups, state.head_params):
        m = len(keys)
        w, b = _wn_weight(vgb)
        rows = T.take_rows(h, np.array([row_of[k] for k in keys]))
        prod = T.bmm(T.reshape(w, (m, c, state.hidden)),
                     T.reshape(rows, (m, state.hidden, 1)))
        stacks.append(T.add(T.reshape(prod, (m, c)), T.reshape(b, (m, c))))
    return stacks


def era_forward(state: ERAState) -> dict:
    """Head outputs per (expert, key); key "depth" is the depth head."""
    outs = {}
    for (c, keys), stack in zip(state.groups, _head_stacks(state)):
        for r, key in enumerate(keys):
            outs[key] = T.reshape(T.take_rows(stack, np.array([r])), (c,))
    return outs


def width_logits(o: Tensor) -> Tensor:
    """Rank-space keep logits: softmax -> tail-inclusive cumsum -> logit.

    p_e = sum_{w>=e} softmax(o)_w is non-increasing, so keep probability
    falls with importance rank; clamping to [eps, 1-eps] keeps the inverse
    sigmoid finite (p_1 = 1 exactly). Works on a vector or batched rows.
    """
    y = T.softmax(o)
    p = T.flip_last(T.cumsum(T.flip_last(y)))
    p = T.clip(p, LOGIT_EPS, 1.0 - LOGIT_EPS)
    return T.sub(T.log(p), T.log(T.add_const(T.neg(p), 1.0)))


def depth_logits(o: Tensor, ranking_perm: np.ndarray) -> Tensor:
    """Same construction as width_logits, scattered along the depth ranking."""
    perm = np.asarray(ranking_perm, dtype=np.int64)
    if sorted(perm.tolist()) != list(range(len(perm))):
        raise ValueError("ranking must be a permutation")
    return T.scatter_perm(width_logits(o), perm)


def gumbel_sigmoid(logit: Tensor, tau: float, rng: Rng) -> Tensor:
    """sigmoid((logit + n) / tau) with n the difference of two Gumbel draws.

    The difference is logistic, so thresholding the output at 0.5 is a
    Bernoulli draw with parameter sigmoid(logit) exactly. One noise value is
    shared across the whole logit vector (the relaxation of choosing a keep
    ratio), which keeps rank-ordered logits rank-ordered after noising.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    n = float(rng.gumbel() - rng.gumbel())
    return T.sigmoid(T.scale(T.add_const(logit, n), 1.0 / tau))


@dataclass
class ArchitectureLogits:
    width: list = field(default_factory=list)   # per expert: {block id: rank-space v}
    depth: list = field(default_factory=list)   # per expert: rank-space u
    ranking: list = field(default_factory=list)


def make_soft_masks(state: ERAState, models, tau: float, rng: Rng):
    """Soft architecture masks for every expert plus the raw logits.

    Per-row logistic noise is applied in rank space (one draw per head, so
    rank ordering survives noising); the physical mask for a unit is looked
    up through its block's importance order.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if len(models) != state.n_experts:
        raise ValueError("model count does not match agent")
    for i, model in enumerate(models):
        if [wb.id for wb in model.width_blocks] != state.block_ids:
            raise ValueError(f"expert {i} structure does not match agent heads")
    from .unet import SoftMasks  # local import to avoid a cycle

    masks = [SoftMasks() for _ in models]
    logits = ArchitectureLogits(
        width=[{} for _ in models],
        depth=[None] * len(models),
        ranking=list(state.depth_ranking),
    )
    for (c, keys), stack in zip(state.groups, _head_stacks(state)):
        v = width_logits(stack)                       # (m, c), rank space
        noise = rng.gumbel((len(keys), 1)) - rng.gumbel((len(keys), 1))
        soft = T.sigmoid(T.scale(T.add_const(v, noise), 1.0 / tau))
        for r, (i, key) in enumerate(keys):
            row = T.reshape(T.take_rows(soft, np.array([r])), (c,))
            if key == "depth":
                logits.depth[i] = v.data[r].copy()
                u_phys = T.scatter_perm(row, state._rank_perm)
                for j, did in enumerate(state.depth_ids):
                    masks[i].depth[did] = T.pick(u_phys, j)
            else:
                logits.width[i][key] = v.data[r].copy()
                masks[i].width[key] = T.scatter_perm(
                    row, models[i].importance_order[key]
                )
    return masks, logits


def extract_architecture(state: ERAState, models, tau: float):
    """Noise-free binary decisions: threshold sigmoid(logit/tau) at 0.5 and
    keep the corresponding prefix of each importance order.

    The tail-sum construction pins the rank-1 keep probability at ~1, so
    every surviving block keeps at least one unit.
    """
    outs = era_forward(state)
    from .unet import SoftMasks

    binaries = []
    descriptor = {"experts": []}
    for i, model in enumerate(models):
        m = SoftMasks()
        entry = {"width_kept": {}, "kept_units": {}, "depth": {}}
        for wb in model.width_blocks:
            v = width_logits(outs[(i, wb.id)]).data
            soft = 1.0 / (1.0 + np.exp(-v / tau))
            kept = max(int((soft > 0.5).sum()), 1)
            order = model.importance_order[wb.id]
            mask = np.zeros(wb.units)
            mask[order[:kept]] = 1.0
            m.width[wb.id] = mask
            entry["width_kept"][wb.id] = kept
            entry["kept_units"][wb.id] = sorted(int(u) for u in order[:kept])
        u = width_logits(outs[(i, "depth")]).data
        soft_u = 1.0 / (1.0 + np.exp(-u / tau))
        kept_d = max(int((soft_u > 0.5).sum()), 1)
        kept_ids = set(state.depth_ranking[:kept_d])
        for did in state.depth_ids:
            on = 1.0 if did in kept_ids else 0.0
            m.depth[did] = on
            entry["depth"][did] = int(on)
        binaries.append(m)
        descriptor["experts"].append(entry)
    descriptor["depth_ranking"] = list(state.depth_ranking)
    return binaries, descriptor


class NaiveAgent:
    """Ablation baseline: free per-unit logits, soft value
    sigmoid(-(beta + n)/tau); no recurrent trunk, no importance coupling."""

    def __init__(self, models, rng: Rng):
        self.n_experts = len(models)
        self.block_ids = [wb.id for wb in models[0].width_blocks]
        self.block_units = {wb.id: wb.units for wb in models[0].width_blocks}
        self.depth_ids = [d.id for d in models[0].depth_units]
        self._params = []
        self.width_beta = {}
        self.depth_beta = {}
        for i in range(self.n_experts):
            for bid in self.block_ids:
                p = Parameter(0.1 * rng.normal((self.block_units[bid],)),
                              name=f"naive.{i}.{bid}")
                self.width_beta[(i, bid)] = p
                self._params.append(p)
            p = Parameter(0.1 * rng.normal((len(self.depth_ids),)),
                          name=f"naive.{i}.depth")
            self.depth_beta[i] = p
            self._params.append(p)

    def parameters(self):
        return self._params

    def zero_grad(self):
        for p in self._params:
            p.zero_grad()

    def param_count(self):
        return sum(p.data.size for p in self._params)

    def state_arrays(self):
        return {p.name: p.data.copy() for p in self._params}

    def load_arrays(self, arrays):
        for p in self._params:
            p.data[...] = arrays[p.name]


def naive_soft_masks(agent: NaiveAgent, models, tau: float, rng: Rng):
    from .unet import SoftMasks

    masks = []
    for i, model in enumerate(models):
        m = SoftMasks()
        for wb in model.width_blocks:
            beta = agent.width_beta[(i, wb.id)]
            n = rng.gumbel(beta.data.shape) - rng.gumbel(beta.data.shape)
            m.width[wb.id] = T.sigmoid(
                T.scale(T.neg(T.add_const(beta, n)), 1.0 / tau)
            )
        beta_d = agent.depth_beta[i]
        n = rng.gumbel(beta_d.data.shape) - rng.gumbel(beta_d.data.shape)
        soft_u = T.sigmoid(T.scale(T.neg(T.add_const(beta_d, n)), 1.0 / tau))
        for j, did in enumerate(agent.depth_ids):
            m.depth[did] = T.pick(soft_u, j)
        masks.append(m)
    return masks, None


def naive_extract(agent: NaiveAgent, models, tau: float):
    """Threshold the noise-free naive masks; kept sets need not be prefixes.

    Keeps the strongest unit when a surviving block would otherwise empty.
    """
    from .unet import SoftMasks

    binaries = []
    descriptor = {"experts": []}
    for i, model in enumerate(models):
        m = SoftMasks()
        entry = {"width_kept": {}, "kept_units": {}, "depth": {}}
        beta_d = agent.depth_beta[i].data
        soft_u = 1.0 / (1.0 + np.exp(beta_d / tau))
        for j, did in enumerate(agent.depth_ids):
            on = 1.0 if soft_u[j] > 0.5 else 0.0
            m.depth[did] = on
            entry["depth"][did] = int(on)
        for wb in model.width_blocks:
            beta = agent.width_beta[(i, wb.id)].data
            soft = 1.0 / (1.0 + np.exp(beta / tau))
            mask = (soft > 0.5).astype(np.float64)
            layer_on = wb.owner is None or m.depth[wb.owner] == 1.0
            if mask.sum() == 0 and layer_on:
                mask[int(np.argmax(soft))] = 1.0
            m.width[wb.id] = mask
            entry["width_kept"][wb.id] = int(mask.sum())
            entry["kept_units"][wb.id] = sorted(int(u) for u in np.flatnonzero(mask))
        binaries.append(m)
        descriptor["experts"].append(entry)
    return binaries, descriptor
