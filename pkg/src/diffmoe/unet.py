"""Elastic 1-D U-Net denoiser.

Width units are the hidden channels of each ResBlock (the first conv's
outputs) and the heads of each attention block; masking them, slicing them
out, and counting their MACs must all agree exactly, so the three views
(soft-mask forward, materialize, macs_table) are kept structurally parallel.

Depth units are the last layer of every encoder and decoder stage. A kept
encoder unit computes u*f(F) + (1-u)*F; a decoder unit concatenates its
stage's skip connection into f, so dropping it also drops the skip.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import Rng
from .tensor import Parameter, Tensor, no_tape


@dataclass(frozen=True)
class ModelConfig:
    input_channels: int = 1
    stage_channels: tuple = (16, 32, 64)
    layers_per_stage: int = 2
    attention_stages: tuple = (2,)
    heads: int = 4
    signal_length: int = 32
    time_embed_dim: int = 64
    num_classes: int | None = None

    def validate(self) -> None:
        stages = len(self.stage_channels)
        if stages < 1 or self.layers_per_stage < 1:
            raise ValueError("need at least one stage and one layer per stage")
        if self.signal_length % (2 ** (stages - 1)) != 0:
            raise ValueError(
                f"signal_length {self.signal_length} not divisible by 2^{stages - 1}"
            )
        for s in self.attention_stages:
            if not (0 <= s < stages):
                raise ValueError(f"attention stage {s} out of range")
            if self.stage_channels[s] % self.heads != 0:
                raise ValueError(
                    f"heads {self.heads} must divide stage {s} channels "
                    f"{self.stage_channels[s]}"
                )
        if self.time_embed_dim % 2 != 0:
            raise ValueError("time_embed_dim must be even")
        if self.num_classes is not None and self.num_classes < 1:
            raise ValueError("num_classes must be positive when set")


@dataclass
class SoftMasks:
    """Architecture relaxation: one value per width unit, one per depth unit.

    Entries are physical-index aligned. Values may be Tensors (differentiable
    soft masks) or plain binary numpy/floats.
    """

    width: dict = field(default_factory=dict)
    depth: dict = field(default_factory=dict)


class _ResBlock:
    """norm -> SiLU -> conv3 -> +time proj -> norm -> SiLU -> [mask] -> conv3,
    plus a residual shortcut (1x1 conv when channel counts differ).

    The width mask sits after the second norm/SiLU: per-channel normalization
    is scale-invariant, so masking earlier would be erased for survivors and
    would leak the norm's shift for zeroed channels, breaking hard-prune
    equivalence.
    """

    def __init__(self, name, in_ch, out_ch, hidden, ted, length, getp):
        self.name = name
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.hidden = hidden
        self.ted = ted
        self.length = length
        self.n1g = getp(f"{name}.n1g", (in_ch,), "ones")
        self.n1b = getp(f"{name}.n1b", (in_ch,), "zeros")
        self.w1 = getp(f"{name}.w1", (hidden, in_ch, 3), "conv")
        self.b1 = getp(f"{name}.b1", (hidden,), "zeros")
        self.tw = getp(f"{name}.tw", (hidden, ted), "dense")
        self.tb = getp(f"{name}.tb", (hidden,), "zeros")
        self.n2g = getp(f"{name}.n2g", (hidden,), "ones")
        self.n2b = getp(f"{name}.n2b", (hidden,), "zeros")
        self.w2 = getp(f"{name}.w2", (out_ch, hidden, 3), "conv")
        self.b2 = getp(f"{name}.b2", (out_ch,), "zeros")
        if in_ch != out_ch:
            self.sw = getp(f"{name}.sw", (out_ch, in_ch, 1), "conv")
            self.sb = getp(f"{name}.sb", (out_ch,), "zeros")
        else:
            self.sw = self.sb = None

    @property
    def units(self):
        return self.hidden

    def forward(self, x, temb, mask=None):
        h = T.silu(T.channel_norm(x, self.n1g, self.n1b))
        h = T.conv1d(h, self.w1, self.b1)
        h = T.add_spatial_bias(h, T.dense(temb, self.tw, self.tb))
        h = T.silu(T.channel_norm(h, self.n2g, self.n2b))
        if mask is not None:
            h = T.mask_channels(h, T.as_tensor(mask))
        h = T.conv1d(h, self.w2, self.b2)
        s = x if self.sw is None else T.conv1d(x, self.sw, self.sb)
        return T.add(h, s)

    def unit_l1(self):
        return np.abs(self.w1.data).sum(axis=(1, 2))

    def sliced_arrays(self, kept):
        out = {
            f"{self.name}.n1g": self.n1g.data.copy(),
            f"{self.name}.n1b": self.n1b.data.copy(),
            f"{self.name}.w1": self.w1.data[kept].copy(),
            f"{self.name}.b1": self.b1.data[kept].copy(),
            f"{self.name}.tw": self.tw.data[kept].copy(),
            f"{self.name}.tb": self.tb.data[kept].copy(),
            f"{self.name}.n2g": self.n2g.data[kept].copy(),
            f"{self.name}.n2b": self.n2b.data[kept].copy(),
            f"{self.name}.w2": self.w2.data[:, kept].copy(),
            f"{self.name}.b2": self.b2.data.copy(),
        }
        if self.sw is not None:
            out[f"{self.name}.sw"] = self.sw.data.copy()
            out[f"{self.name}.sb"] = self.sb.data.copy()
        return out

    def unit_macs(self):
        # conv1 row + time-projection row + conv2 column, per hidden unit
        return self.in_ch * 3 * self.length + self.ted + self.out_ch * 3 * self.length

    def fixed_macs(self):
        return 0 if self.sw is None else self.out_ch * self.in_ch * self.length


class _AttentionBlock:
    """Pre-norm multi-head self-attention over the spatial axis; the head
    mask multiplies per-head outputs before the output projection."""

    def __init__(self, name, ch, heads, head_dim, length, getp):
        self.name = name
        self.ch = ch
        self.heads = heads
        self.head_dim = head_dim
        self.length = length
        inner = heads * head_dim
        self.ng = getp(f"{name}.ng", (ch,), "ones")
        self.nb = getp(f"{name}.nb", (ch,), "zeros")
        self.wq = getp(f"{name}.wq", (inner, ch, 1), "conv")
        self.bq = getp(f"{name}.bq", (inner,), "zeros")
        self.wk = getp(f"{name}.wk", (inner, ch, 1), "conv")
        self.bk = getp(f"{name}.bk", (inner,), "zeros")
        self.wv = getp(f"{name}.wv", (inner, ch, 1), "conv")
        self.bv = getp(f"{name}.bv", (inner,), "zeros")
        self.wo = getp(f"{name}.wo", (ch, inner, 1), "conv")
        self.bo = getp(f"{name}.bo", (ch,), "zeros")

    @property
    def units(self):
        return self.heads

    def forward(self, x, mask=None):
        B, C, L = x.data.shape
        H, D = self.heads, self.head_dim
        h = T.channel_norm(x, self.ng, self.nb)
        q = T.reshape(T.conv1d(h, self.wq, self.bq), (B, H, D, L))
        k = T.reshape(T.conv1d(h, self.wk, self.bk), (B, H, D, L))
        v = T.reshape(T.conv1d(h, self.wv, self.bv), (B, H, D, L))
        scores = T.scale(T.bmm(T.swap_last(q), k), 1.0 / math.sqrt(D))
        attn = T.softmax(scores)
        out = T.bmm(v, T.swap_last(attn))
        if mask is not None:
            out = T.mask_channels(out, T.as_tensor(mask))
        out = T.conv1d(T.reshape(out, (B, H * D, L)), self.wo, self.bo)
        return T.add(x, out)

    def unit_l1(self):
        D = self.head_dim
        return np.array(
            [np.abs(self.wo.data[:, h * D : (h + 1) * D]).sum() for h in range(self.heads)]
        )

    def sliced_arrays(self, kept):
        D = self.head_dim
        rows = np.concatenate([np.arange(h * D, (h + 1) * D) for h in kept])
        return {
            f"{self.name}.ng": self.ng.data.copy(),
            f"{self.name}.nb": self.nb.data.copy(),
            f"{self.name}.wq": self.wq.data[rows].copy(),
            f"{self.name}.bq": self.bq.data[rows].copy(),
            f"{self.name}.wk": self.wk.data[rows].copy(),
            f"{self.name}.bk": self.bk.data[rows].copy(),
            f"{self.name}.wv": self.wv.data[rows].copy(),
            f"{self.name}.bv": self.bv.data[rows].copy(),
            f"{self.name}.wo": self.wo.data[:, rows].copy(),
            f"{self.name}.bo": self.bo.data.copy(),
        }

    def unit_macs(self):
        # q/k/v projection rows, the two score/apply contractions, wo columns
        D, C, L = self.head_dim, self.ch, self.length
        return 3 * D * C * L + 2 * L * L * D + C * D * L

    def fixed_macs(self):
        return 0


@dataclass
class _Layer:
    res: _ResBlock
    attn: _AttentionBlock | None
    depth_id: str | None
    takes_skip: bool


@dataclass
class WidthBlock:
    id: str
    kind: str                 # "res" | "attn"
    block: object
    owner: str | None         # depth unit id, when inside a droppable layer

    @property
    def units(self):
        return self.block.units


@dataclass
class DepthUnit:
    id: str
    branch: str               # "enc" | "dec"
    stage: int


class ExpertModel:
    """Denoiser with registries for width blocks, depth units and parameters.

    Instances are built by `build_model` (fresh init), `clone`, checkpoint
    loading, or `materialize`; all paths share the same constructor driven by
    a structure table so parameter order stays canonical.
    """

    def __init__(self, config: ModelConfig, structure: dict, getp):
        self.config = config
        self.structure = structure
        self._params: list[Parameter] = []
        self._build(getp)
        self.importance_order = {
            wb.id: np.arange(wb.units, dtype=np.int64) for wb in self.width_blocks
        }

    # -- construction -------------------------------------------------------

    def _build(self, raw_getp):
        cfg = self.config

        def getp(name, shape, kind):
            p = raw_getp(name, shape, kind)
            self._params.append(p)
            return p

        ted = cfg.time_embed_dim
        chs = cfg.stage_channels
        S = len(chs)
        wu = self.structure["width_units"]
        present = self.structure["depth_present"]

        self.t_w1 = getp("time.w1", (ted, ted), "dense")
        self.t_b1 = getp("time.b1", (ted,), "zeros")
        self.t_w2 = getp("time.w2", (ted, ted), "dense")
        self.t_b2 = getp("time.b2", (ted,), "zeros")
        self.class_table = (
            getp("class.table", (cfg.num_classes, ted), "embed")
            if cfg.num_classes
            else None
        )

        self.width_blocks: list[WidthBlock] = []
        self.depth_units: list[DepthUnit] = []
        lengths = [cfg.signal_length // (2 ** s) for s in range(S)]

        def res(name, in_ch, out_ch, length, owner):
            blk = _ResBlock(name, in_ch, out_ch, wu[name], ted, length, getp)
            self.width_blocks.append(WidthBlock(name, "res", blk, owner))
            return blk

        def attn(name, ch, length, owner):
            blk = _AttentionBlock(name, ch, wu[name], ch // cfg.heads, length, getp)
            self.width_blocks.append(WidthBlock(name, "attn", blk, owner))
            return blk

        def make_layer(name, in_ch, out_ch, length, stage, depth_id, takes_skip):
            r = res(f"{name}.res", in_ch, out_ch, length, depth_id)
            a = None
            if stage in cfg.attention_stages:
                a = attn(f"{name}.attn", out_ch, length, depth_id)
            return _Layer(r, a, depth_id, takes_skip)

        self.in_w = getp("in.w", (chs[0], cfg.input_channels, 3), "conv")
        self.in_b = getp("in.b", (chs[0],), "zeros")

        self.enc_stages: list[list[_Layer]] = []
        for s in range(S):
            layers = []
            for i in range(cfg.layers_per_stage):
                last = i == cfg.layers_per_stage - 1
                did = f"enc{s}" if last else None
                if last and not present[f"enc{s}"]:
                    continue
                if did is not None:
                    self.depth_units.append(DepthUnit(did, "enc", s))
                layers.append(
                    make_layer(f"enc{s}.l{i}", chs[s], chs[s], lengths[s], s, did, False)
                )
            self.enc_stages.append(layers)

        self.down = []
        for s in range(S - 1):
            w = getp(f"down{s}.w", (chs[s + 1], chs[s], 3), "conv")
            b = getp(f"down{s}.b", (chs[s + 1],), "zeros")
            self.down.append((w, b))

        mid_attn_stage = S - 1
        self.mid_res1 = res("mid.res1", chs[-1], chs[-1], lengths[-1], None)
        self.mid_attn = (
            attn("mid.attn", chs[-1], lengths[-1], None)
            if mid_attn_stage in cfg.attention_stages
            else None
        )
        self.mid_res2 = res("mid.res2", chs[-1], chs[-1], lengths[-1], None)

        # decoder stages stored deepest-first (forward traversal order)
        self.dec_stages: list[list[_Layer]] = []
        self.dec_stage_ids: list[int] = []
        for s in range(S - 1, -1, -1):
            layers = []
            for i in range(cfg.layers_per_stage):
                last = i == cfg.layers_per_stage - 1
                did = f"dec{s}" if last else None
                if last and not present[f"dec{s}"]:
                    continue
                if did is not None:
                    self.depth_units.append(DepthUnit(did, "dec", s))
                in_ch = chs[s] * 2 if last else chs[s]  # skip concat at the depth layer
                layers.append(
                    make_layer(f"dec{s}.l{i}", in_ch, chs[s], lengths[s], s, did, last)
                )
            self.dec_stages.append(layers)
            self.dec_stage_ids.append(s)

        self.up = []
        for s in range(S - 1, 0, -1):
            w = getp(f"up{s}.w", (chs[s - 1], chs[s], 3), "conv")
            b = getp(f"up{s}.b", (chs[s - 1],), "zeros")
            self.up.append((w, b))

        self.out_ng = getp("out.ng", (chs[0],), "ones")
        self.out_nb = getp("out.nb", (chs[0],), "zeros")
        self.out_w = getp("out.w", (cfg.input_channels, chs[0], 3), "out_zero")
        self.out_b = getp("out.b", (cfg.input_channels,), "zeros")

        self._block_by_id = {wb.id: wb for wb in self.width_blocks}

    # -- basic accessors -----------------------------------------------------

    @property
    def data_shape(self):
        return (self.config.input_channels, self.config.signal_length)

    def parameters(self) -> list[Parameter]:
        return self._params

    def named_parameters(self):
        return [(p.name, p) for p in self._params]

    def param_count(self) -> int:
        return sum(p.data.size for p in self._params)

    def zero_grad(self):
        for p in self._params:
            p.zero_grad()

    def block(self, block_id: str) -> WidthBlock:
        return self._block_by_id[block_id]

    def state_arrays(self) -> dict:
        return {p.name: p.data.copy() for p in self._params}

    def clone(self) -> "ExpertModel":
        arrays = self.state_arrays()
        m = ExpertModel(self.config, _copy_structure(self.structure),
                        _array_source(arrays))
        m.importance_order = {k: v.copy() for k, v in self.importance_order.items()}
        return m

    # -- forward -------------------------------------------------------------

    def _time_embedding(self, t, cond):
        t = np.atleast_1d(np.asarray(t, dtype=np.float64))
        half = self.config.time_embed_dim // 2
        freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
        ang = t[:, None] * freqs[None, :]
        feats = Tensor(np.concatenate([np.sin(ang), np.cos(ang)], axis=1))
        h = T.silu(T.dense(feats, self.t_w1, self.t_b1))
        h = T.dense(h, self.t_w2, self.t_b2)
        if self.class_table is not None:
            if cond is None:
                raise ValueError("class-conditional model requires cond labels")
            h = T.add(h, T.take_rows(self.class_table, np.asarray(cond, dtype=np.int64)))
        return h

    def _wmask(self, masks, block_id):
        if masks is None:
            return None
        return masks.width.get(block_id)

    def _apply_layer(self, layer, x, temb, masks, skip=None):
        inp = x if skip is None else T.concat([x, skip], axis=1)
        h = layer.res.forward(inp, temb, mask=self._wmask(masks, layer.res.name))
        if layer.attn is not None:
            h = layer.attn.forward(h, mask=self._wmask(masks, layer.attn.name))
        return h

    def _apply_stage_layer(self, layer, h, temb, masks, skip):
        """Depth-aware layer application (Eqs. for encoder/decoder units)."""
        if layer.depth_id is None:
            return self._apply_layer(layer, h, temb, masks)
        u = None if masks is None else masks.depth.get(layer.depth_id)
        s = skip if layer.takes_skip else None
        if u is None:
            return self._apply_layer(layer, h, temb, masks, skip=s)
        if not isinstance(u, Tensor):
            uf = float(u)
            if uf == 1.0:
                return self._apply_layer(layer, h, temb, masks, skip=s)
            if uf == 0.0:
                return h
            u = Tensor(np.array(uf))
        out = self._apply_layer(layer, h, temb, masks, skip=s)
        keep = T.smul(out, u)
        drop = T.smul(h, T.add_const(T.neg(u), 1.0))
        return T.add(keep, drop)

    def forward(self, x, t, cond=None, masks=None) -> Tensor:
        if masks is not None:
            self._check_masks(masks)
        x = T.as_tensor(x)
        t = np.asarray(t)
        if t.ndim == 0:
            t = np.full(x.data.shape[0], int(t))
        temb = self._time_embedding(t, cond)
        h = T.conv1d(x, self.in_w, self.in_b)

        skips = {}
        S = len(self.config.stage_channels)
        for s in range(S):
            for layer in self.enc_stages[s]:
                h = self._apply_stage_layer(layer, h, temb, masks, skip=None)
            skips[s] = h
            if s < S - 1:
                w, b = self.down[s]
                h = T.conv1d(h, w, b, stride=2)

        h = self.mid_res1.forward(h, temb, mask=self._wmask(masks, "mid.res1"))
        if self.mid_attn is not None:
            h = self.mid_attn.forward(h, mask=self._wmask(masks, "mid.attn"))
        h = self.mid_res2.forward(h, temb, mask=self._wmask(masks, "mid.res2"))

        for idx, s in enumerate(self.dec_stage_ids):
            for layer in self.dec_stages[idx]:
                h = self._apply_stage_layer(layer, h, temb, masks, skip=skips[s])
            if s > 0:
                w, b = self.up[idx]
                h = T.conv1d(T.upsample2(h), w, b)

        h = T.silu(T.channel_norm(h, self.out_ng, self.out_nb))
        return T.conv1d(h, self.out_w, self.out_b)

    def predict(self, x: np.ndarray, t, cond=None) -> np.ndarray:
        """Plain numpy forward, never recorded."""
        with no_tape():
            return self.forward(Tensor(x), t, cond=cond).data

    def _check_masks(self, masks: SoftMasks):
        for bid, m in masks.width.items():
            wb = self._block_by_id.get(bid)
            if wb is None:
                raise ValueError(f"mask for unknown block '{bid}'")
            md = m.data if isinstance(m, Tensor) else np.asarray(m)
            if md.shape != (wb.units,):
                raise ValueError(
                    f"mask shape {md.shape} does not match block '{bid}' "
                    f"with {wb.units} units"
                )
        known = {d.id for d in self.depth_units}
        for did in masks.depth:
            if did not in known:
                raise ValueError(f"depth mask for unknown unit '{did}'")


def _copy_structure(structure):
    return {
        "width_units": dict(structure["width_units"]),
        "depth_present": dict(structure["depth_present"]),
    }


def _array_source(arrays: dict):
    def getp(name, shape, kind):
        arr = arrays[name]
        if arr.shape != tuple(shape):
            raise ValueError(f"stored array {name} has shape {arr.shape}, expected {shape}")
        return Parameter(arr.copy(), name=name)

    return getp


def _init_source(rng: Rng):
    def getp(name, shape, kind):
        if kind == "zeros":
            data = np.zeros(shape)
        elif kind == "ones":
            data = np.ones(shape)
        elif kind == "out_zero":
            data = np.zeros(shape)
        elif kind == "conv":
            fan_in = shape[1] * shape[2]
            data = rng.normal(shape) / math.sqrt(fan_in)
        elif kind == "dense":
            data = rng.normal(shape) / math.sqrt(shape[1])
        elif kind == "embed":
            data = 0.02 * rng.normal(shape)
        else:
            raise ValueError(f"unknown init kind {kind}")
        return Parameter(data, name=name)

    return getp


def full_structure(config: ModelConfig) -> dict:
    """Width/depth table of the unpruned model."""
    chs = config.stage_channels
    S = len(chs)
    width = {}
    depth = {}

    def add_layer(name, stage):
        width[f"{name}.res"] = chs[stage]
        if stage in config.attention_stages:
            width[f"{name}.attn"] = config.heads

    for s in range(S):
        for i in range(config.layers_per_stage):
            add_layer(f"enc{s}.l{i}", s)
        depth[f"enc{s}"] = True
    width["mid.res1"] = chs[-1]
    if (S - 1) in config.attention_stages:
        width["mid.attn"] = config.heads
    width["mid.res2"] = chs[-1]
    for s in range(S - 1, -1, -1):
        for i in range(config.layers_per_stage):
            add_layer(f"dec{s}.l{i}", s)
        depth[f"dec{s}"] = True
    return {"width_units": width, "depth_present": depth}


def build_model(config: ModelConfig, rng: Rng) -> ExpertModel:
    config.validate()
    return ExpertModel(config, full_structure(config), _init_source(rng))


# ---------------------------------------------------------------------------
# importance ordering


def importance_sort(model: ExpertModel) -> dict:
    """Order each block's units by descending L1 norm (stable ties).

    ResBlocks rank hidden channels by the first conv's per-output-channel
    filter norms; attention blocks rank heads by their output-projection
    slice norms. Parameters are not moved.
    """
    for wb in model.width_blocks:
        norms = wb.block.unit_l1()
        model.importance_order[wb.id] = np.argsort(-norms, kind="stable")
    return model.importance_order


# ---------------------------------------------------------------------------
# materialization


def materialize(model: ExpertModel, masks: SoftMasks) -> ExpertModel:
    """Physically remove masked width units and dropped depth layers.

    Masks must be binary. The result's plain forward matches the parent's
    masked forward to float round-off.
    """
    depth_on = {}
    for unit in model.depth_units:
        val = masks.depth.get(unit.id, 1)
        if isinstance(val, Tensor):
            val = val.data.ravel()[0]
        val = float(val)
        if val not in (0.0, 1.0):
            raise ValueError(f"depth mask for {unit.id} is not binary: {val}")
        depth_on[unit.id] = bool(val)

    kept_units = {}
    for wb in model.width_blocks:
        m = masks.width.get(wb.id)
        if m is None:
            kept = np.arange(wb.units)
        else:
            md = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
            if not np.all(np.isin(md, (0.0, 1.0))):
                raise ValueError(f"width mask for {wb.id} is not binary")
            kept = np.flatnonzero(md == 1.0)
        if kept.size == 0 and (wb.owner is None or depth_on[wb.owner]):
            raise ValueError(
                f"block '{wb.id}' fully masked while its layer survives"
            )
        kept_units[wb.id] = kept

    structure = _copy_structure(model.structure)
    arrays = {p.name: p.data.copy() for p in model.parameters()}
    for wb in model.width_blocks:
        if wb.owner is not None and not depth_on[wb.owner]:
            for p in _block_param_names(wb):
                arrays.pop(p, None)
            continue
        kept = kept_units[wb.id]
        if kept.size != wb.units:
            arrays.update(wb.block.sliced_arrays(kept))
        structure["width_units"][wb.id] = int(kept.size)
    for unit in model.depth_units:
        structure["depth_present"][unit.id] = depth_on[unit.id]

    return ExpertModel(model.config, structure, _materialize_source(arrays))


def _block_param_names(wb: WidthBlock):
    if wb.kind == "res":
        suffixes = ["n1g", "n1b", "w1", "b1", "tw", "tb", "n2g", "n2b", "w2", "b2", "sw", "sb"]
    else:
        suffixes = ["ng", "nb", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"]
    return [f"{wb.id}.{s}" for s in suffixes]


def _materialize_source(arrays: dict):
    def getp(name, shape, kind):
        arr = arrays[name]
        if arr.shape != tuple(shape):
            raise ValueError(f"sliced array {name}: {arr.shape} vs expected {shape}")
        return Parameter(arr, name=name)

    return getp


# ---------------------------------------------------------------------------
# MACs accounting


@dataclass
class MacsEntry:
    block_id: str
    units: int
    slope: int              # MACs per kept unit
    owner: str | None

    @property
    def full(self) -> int:
        return self.units * self.slope


@dataclass
class MacsTable:
    fixed: int
    width: list
    depth_fixed: dict       # depth id -> in-layer fixed MACs (shortcuts)

    def entry(self, block_id: str) -> MacsEntry:
        return next(e for e in self.width if e.block_id == block_id)

    def total(self, width_kept: dict, depth_on: dict) -> int:
        """Exact MACs for integer kept-unit counts and binary depth choices."""
        total = self.fixed
        for did, fx in self.depth_fixed.items():
            if depth_on.get(did, True):
                total += fx
        for e in self.width:
            if e.owner is not None and not depth_on.get(e.owner, True):
                continue
            total += e.slope * int(width_kept.get(e.block_id, e.units))
        return total


def count_macs(model: ExpertModel) -> int:
    """Per-sample multiply-accumulates of the model as materialized."""
    cfg = model.config
    ted = cfg.time_embed_dim
    total = ted * ted + ted * ted  # time MLP
    L0 = cfg.signal_length
    total += model.in_w.data.shape[0] * cfg.input_channels * 3 * L0
    for wb in model.width_blocks:
        total += wb.units * wb.block.unit_macs() + wb.block.fixed_macs()
    chs = cfg.stage_channels
    S = len(chs)
    for s in range(S - 1):
        total += chs[s + 1] * chs[s] * 3 * (cfg.signal_length // (2 ** (s + 1)))
    for s in range(S - 1, 0, -1):
        total += chs[s - 1] * chs[s] * 3 * (cfg.signal_length // (2 ** (s - 1)))
    total += cfg.input_channels * chs[0] * 3 * L0
    return total


def macs_table(model: ExpertModel) -> MacsTable:
    """Affine per-block MACs model: exact for every binary architecture."""
    width = [
        MacsEntry(wb.id, wb.units, wb.block.unit_macs(), wb.owner)
        for wb in model.width_blocks
    ]
    depth_fixed = {d.id: 0 for d in model.depth_units}
    fixed = count_macs(model)
    for e in width:
        fixed -= e.full
    for wb in model.width_blocks:
        fx = wb.block.fixed_macs()
        if wb.owner is not None:
            depth_fixed[wb.owner] += fx
            fixed -= fx
    return MacsTable(fixed=fixed, width=width, depth_fixed=depth_fixed)
