"""GRAtt decoder: cross-attention, gated residual, gate-masked self-attention.

Every layer is pre-norm: ``x + Attn(LN(x))`` and ``x + FFN(LN(x))``.  Queries
whose gate is 0 are replaced by the previous frame's final-layer query and,
under the ``OneToZero`` mask, skip both self-attention and the feed-forward
block, so a query that is gated off at every layer leaves the frame exactly
as it entered.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from gratt import tensor as T
from gratt.gating import DEFAULT_TAU, GateHead, GateMode, GateSample, gate_logit, sample_gates
from gratt.tensor import Tensor


class MaskConfig(str, Enum):
    ALL_TO_ALL = "AllToAll"
    ALL_BUT_ZERO_TO_ZERO = "AllButZeroToZero"
    ALL_BUT_ZERO_TO_ONE = "AllButZeroToOne"
    ONE_TO_ZERO = "OneToZero"


class GatePlacement(str, Enum):
    INTER_FRAME = "InterFrame"
    INTER_LAYER = "InterLayer"
    INTER_ATTENTION = "InterAttention"


@dataclass
class DecoderConfig:
    n_queries: int = 8
    width: int = 32
    n_layers: int = 3
    n_heads: int = 4
    n_classes: int = 3
    tau: float = DEFAULT_TAU
    mask_config: MaskConfig = MaskConfig.ONE_TO_ZERO
    gate_placement: GatePlacement = GatePlacement.INTER_ATTENTION
    gating_enabled: bool = True
    ffn_mult: int = 4
    gate_bias_init: float = 1.0
    eval_gate_mode: GateMode = GateMode.DETERMINISTIC

    def __post_init__(self):
        self.mask_config = MaskConfig(self.mask_config)
        self.gate_placement = GatePlacement(self.gate_placement)
        self.eval_gate_mode = GateMode(self.eval_gate_mode)
        if min(self.n_queries, self.width, self.n_layers, self.n_heads, self.n_classes) < 1:
            raise ValueError("n_queries, width, n_layers, n_heads and n_classes must be >= 1")
        if self.width % self.n_heads:
            raise ValueError(f"{self.n_heads} heads do not divide width {self.width}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if (
            self.gate_placement is not GatePlacement.INTER_ATTENTION
            and self.mask_config is not MaskConfig.ALL_TO_ALL
        ):
            # the gate acts after self-attention there, so there is nothing to mask
            raise ValueError(f"{self.gate_placement.value} placement requires the AllToAll mask")

    @property
    def head_dim(self) -> int:
        return self.width // self.n_heads


@dataclass
class AttentionMask:
    additive: np.ndarray  # [N, N], entries in {0, -inf}
    bypass_rows: np.ndarray  # [N] bool

    @property
    def active_rows(self) -> np.ndarray:
        return np.flatnonzero(~self.bypass_rows)


# ---------------------------------------------------------------------------
# parameters


def _attn_shapes(c: int, prefix: str) -> dict[str, tuple]:
    shapes = {f"{prefix}.ln.g": (c,), f"{prefix}.ln.b": (c,)}
    for m in ("q", "k", "v", "o"):
        shapes[f"{prefix}.w{m}"] = (c, c)
        shapes[f"{prefix}.b{m}"] = (c,)
    return shapes


def param_shapes(cfg: DecoderConfig) -> dict[str, tuple]:
    c, hidden = cfg.width, cfg.ffn_mult * cfg.width
    shapes: dict[str, tuple] = {"query_embed": (cfg.n_queries, c)}
    for l in range(cfg.n_layers):
        p = f"layers.{l}"
        shapes.update(_attn_shapes(c, f"{p}.ca"))
        shapes[f"{p}.gate.w"] = (c, 1)
        shapes[f"{p}.gate.b"] = (1,)
        shapes.update(_attn_shapes(c, f"{p}.sa"))
        shapes.update(
            {
                f"{p}.ffn.ln.g": (c,),
                f"{p}.ffn.ln.b": (c,),
                f"{p}.ffn.w1": (c, hidden),
                f"{p}.ffn.b1": (hidden,),
                f"{p}.ffn.w2": (hidden, c),
                f"{p}.ffn.b2": (c,),
            }
        )
    shapes.update(
        {
            "head.ln.g": (c,),
            "head.ln.b": (c,),
            "head.cls.w": (c, cfg.n_classes + 1),
            "head.cls.b": (cfg.n_classes + 1,),
            "head.center.w": (c, 2),
            "head.center.b": (2,),
            "head.radius.w": (c, 1),
            "head.radius.b": (1,),
        }
    )
    return shapes


def init_params(cfg: DecoderConfig, seed: int) -> dict[str, Tensor]:
    """Initialise every parameter from its own name-keyed stream.

    Keying by name keeps the shared parameters of a gated and an ungated model
    identical for the same seed.
    """
    params = {}
    for name, shape in param_shapes(cfg).items():
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        leaf = name.rsplit(".", 1)[-1]
        if name == "query_embed":
            arr = rng.normal(0.0, 1.0, shape)
        elif name.endswith("gate.w"):
            arr = rng.normal(0.0, 0.02, shape)
        elif name.endswith("gate.b"):
            arr = np.full(shape, cfg.gate_bias_init)
        elif name.endswith("ln.g"):
            arr = np.ones(shape)
        elif leaf.startswith("w"):
            arr = rng.normal(0.0, 1.0 / math.sqrt(shape[0]), shape)
        else:
            arr = np.zeros(shape)
        params[name] = Tensor(arr, requires_grad=True)
    return params


_BLOCK_KEYS = {
    "ca": ("ln.g", "ln.b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"),
    "sa": ("ln.g", "ln.b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"),
    "ffn": ("ln.g", "ln.b", "w1", "b1", "w2", "b2"),
}


def sub_params(params: dict[str, Tensor], prefix: str) -> dict[str, Tensor]:
    """Parameters under ``prefix`` with the prefix stripped."""
    keys = _BLOCK_KEYS.get(prefix.rsplit(".", 1)[-1])
    if keys is not None:
        return {k: params[f"{prefix}.{k}"] for k in keys}
    n = len(prefix) + 1
    return {k[n:]: v for k, v in params.items() if k.startswith(prefix + ".")}


def gate_head(params: dict[str, Tensor], layer: int, tau: float) -> GateHead:
    return GateHead(params[f"layers.{layer}.gate.w"], params[f"layers.{layer}.gate.b"], tau)


# ---------------------------------------------------------------------------
# blocks


_linear = T.linear


def _attend(q: Tensor, k: Tensor, v: Tensor, heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention; q [n,C], k/v [m,C] -> [n,C]."""
    d = q.shape[1] // heads
    scores = T.scale(T.matmul(T.split_heads(q, heads), T.transpose(T.split_heads(k, heads))), 1.0 / math.sqrt(d))
    if mask is not None:
        scores = T.add(scores, Tensor(np.broadcast_to(mask, scores.shape)))
    weights = T.softmax_rows(scores)
    return T.merge_heads(T.matmul(weights, T.split_heads(v, heads)))


def cross_attention(x: Tensor, features: Tensor, p: dict[str, Tensor], heads: int) -> Tensor:
    """Queries [N,C] attend over frame tokens [T,C]; residual added."""
    if x.shape[1] != features.shape[1]:
        raise ValueError(f"query width {x.shape[1]} != feature width {features.shape[1]}")
    h = T.layer_norm(x, p["ln.g"], p["ln.b"])
    q = _linear(h, p["wq"], p["bq"])
    k = _linear(features, p["wk"], p["bk"])
    v = _linear(features, p["wv"], p["bv"])
    return T.add(x, _linear(_attend(q, k, v, heads), p["wo"], p["bo"]))


def gated_residual(q_cur: Tensor, q_prev_final: Tensor, gates, soft: Tensor | None = None, blend: bool = False) -> Tensor:
    """Keep the current query where the gate is 1, else the previous frame's final query.

    ``soft`` carries the straight-through gradient; with ``blend`` the rows are
    mixed by the soft value instead (used for finite-difference checks).
    """
    if blend:
        if soft is None:
            raise ValueError("blend mode needs soft gate values")
        return T.blend_rows(q_cur, q_prev_final, soft)
    return T.select_rows(q_cur, q_prev_final, gates, soft)


def build_attention_mask(gates, mask_config: MaskConfig | str) -> AttentionMask:
    g = np.asarray(gates, dtype=bool)
    n = g.shape[0]
    cfg = MaskConfig(mask_config)
    add = np.zeros((n, n))
    bypass = np.zeros(n, dtype=bool)
    zero = ~g
    if cfg is MaskConfig.ALL_BUT_ZERO_TO_ZERO:
        add[np.outer(zero, zero)] = -np.inf
    elif cfg is MaskConfig.ALL_BUT_ZERO_TO_ONE:
        add[np.outer(zero, g)] = -np.inf
    elif cfg is MaskConfig.ONE_TO_ZERO:
        bypass = zero.copy()
    np.fill_diagonal(add, 0.0)
    return AttentionMask(add, bypass)


def masked_self_attention(x: Tensor, mask: AttentionMask, p: dict[str, Tensor], heads: int) -> Tensor:
    """Self-attention over all N keys for non-bypass rows; bypass rows copied."""
    active = mask.active_rows
    if active.size == 0:
        return x
    rows_mask = mask.additive[active]
    if np.isneginf(rows_mask).all(axis=1).any():
        raise ValueError("a non-bypass row has every key masked")
    h = T.layer_norm(x, p["ln.g"], p["ln.b"])
    q = _linear(T.take_rows(h, active), p["wq"], p["bq"])
    k = _linear(h, p["wk"], p["bk"])
    v = _linear(h, p["wv"], p["bv"])
    o = _linear(_attend(q, k, v, heads, rows_mask if np.isneginf(rows_mask).any() else None), p["wo"], p["bo"])
    return T.scatter_rows(x, active, T.add(T.take_rows(x, active), o))


def feed_forward(x: Tensor, p: dict[str, Tensor], bypass_rows=None) -> Tensor:
    active = np.arange(x.shape[0]) if bypass_rows is None else np.flatnonzero(~np.asarray(bypass_rows))
    if active.size == 0:
        return x
    xa = T.take_rows(x, active)
    h = T.layer_norm(xa, p["ln.g"], p["ln.b"])
    y = _linear(T.relu(_linear(h, p["w1"], p["b1"])), p["w2"], p["b2"])
    return T.scatter_rows(x, active, T.add(xa, y))


# ---------------------------------------------------------------------------
# layers and full decoder


def _gate(x: Tensor, q_prev_final: Tensor, params, cfg: DecoderConfig, layer: int, mode, noise, key):
    head = gate_head(params, layer, cfg.tau)
    sample = sample_gates(gate_logit(x, head), cfg.tau, mode, noise, key)
    mode = GateMode(mode)
    out = gated_residual(
        x,
        q_prev_final,
        sample.hard,
        sample.soft_tensor,
        blend=mode is GateMode.SOFT,
    )
    return out, sample


def _ungated_sample(n: int) -> GateSample:
    ones = np.ones(n, dtype=bool)
    return GateSample(np.full(n, np.nan), None, None, np.ones(n), ones, GateMode.DETERMINISTIC)


def decoder_layer_forward(
    x: Tensor,
    features: Tensor,
    q_prev_final: Tensor,
    cfg: DecoderConfig,
    params: dict[str, Tensor],
    layer: int,
    gate_mode=GateMode.DETERMINISTIC,
    noise=None,
    frame: int = 0,
) -> tuple[Tensor, GateSample]:
    """One InterAttention layer: cross-attn, gate, gated residual, masked self-attn, FFN."""
    pre = f"layers.{layer}"
    x = cross_attention(x, features, sub_params(params, f"{pre}.ca"), cfg.n_heads)
    if cfg.gating_enabled:
        x, sample = _gate(x, q_prev_final, params, cfg, layer, gate_mode, noise, (frame, layer))
        mask = build_attention_mask(sample.hard, cfg.mask_config)
    else:
        sample = _ungated_sample(cfg.n_queries)
        mask = build_attention_mask(sample.hard, MaskConfig.ALL_TO_ALL)
    x = masked_self_attention(x, mask, sub_params(params, f"{pre}.sa"), cfg.n_heads)
    x = feed_forward(x, sub_params(params, f"{pre}.ffn"), mask.bypass_rows)
    return x, sample


def _plain_layer(x: Tensor, features: Tensor, cfg: DecoderConfig, params, layer: int) -> Tensor:
    pre = f"layers.{layer}"
    x = cross_attention(x, features, sub_params(params, f"{pre}.ca"), cfg.n_heads)
    mask = build_attention_mask(np.ones(cfg.n_queries, dtype=bool), MaskConfig.ALL_TO_ALL)
    x = masked_self_attention(x, mask, sub_params(params, f"{pre}.sa"), cfg.n_heads)
    return feed_forward(x, sub_params(params, f"{pre}.ffn"))


@dataclass
class DecoderOutput:
    queries: Tensor
    samples: list[GateSample] = field(default_factory=list)

    @property
    def gate_bits(self) -> np.ndarray:
        """[rows, N] hard gate bits; rows = L, or 1 for InterFrame."""
        return np.stack([s.hard for s in self.samples]).astype(np.int8)


def decoder_forward(
    features: Tensor,
    q_prev_final: Tensor,
    cfg: DecoderConfig,
    params: dict[str, Tensor],
    gate_mode=GateMode.DETERMINISTIC,
    noise=None,
    frame: int = 0,
) -> DecoderOutput:
    """Decode one frame starting from (and falling back to) ``q_prev_final``."""
    x = q_prev_final
    samples: list[GateSample] = []
    placement = cfg.gate_placement
    if placement is GatePlacement.INTER_ATTENTION or not cfg.gating_enabled:
        for l in range(cfg.n_layers):
            x, s = decoder_layer_forward(x, features, q_prev_final, cfg, params, l, gate_mode, noise, frame)
            samples.append(s)
        if not cfg.gating_enabled and placement is GatePlacement.INTER_FRAME:
            samples = samples[-1:]
    elif placement is GatePlacement.INTER_LAYER:
        for l in range(cfg.n_layers):
            x = _plain_layer(x, features, cfg, params, l)
            x, s = _gate(x, q_prev_final, params, cfg, l, gate_mode, noise, (frame, l))
            samples.append(s)
    else:
        for l in range(cfg.n_layers):
            x = _plain_layer(x, features, cfg, params, l)
        last = cfg.n_layers - 1
        # one gate per query per frame, driven by the last layer's gate head
        x, s = _gate(x, q_prev_final, params, cfg, last, gate_mode, noise, (frame, last))
        samples.append(s)
    return DecoderOutput(x, samples)
