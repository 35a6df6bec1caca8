"""Binary relevance gates with Gumbel-Softmax relaxation.

Each query gets a scalar logit from a linear head.  With ``pi_1 = sigmoid(g)``
and ``pi_0 = 1 - pi_1`` the hard gate is the Gumbel-Max argmax over
``log pi_k + g_k`` and the soft gate is the tempered two-way softmax of the
same scores.  Because ``log pi_1 - log pi_0 = g`` the soft gate reduces to
``sigmoid((g + g_1 - g_0) / tau)``, which is how it is evaluated.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from gratt import tensor as T
from gratt.tensor import Tensor

DEFAULT_TAU = 2.0 / 3.0
UNIFORM_CLAMP = 1e-12


class GateMode(str, Enum):
    SOFT = "soft"
    STRAIGHT_THROUGH = "straight-through"
    DETERMINISTIC = "deterministic"


@dataclass
class GateHead:
    weight: Tensor  # [C, 1]
    bias: Tensor  # [1]
    tau: float = DEFAULT_TAU

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError(f"temperature must be positive, got {self.tau}")
        if self.weight.data.ndim != 2 or self.weight.shape[1] != 1:
            raise ValueError(f"gate weight must be [C, 1], got {self.weight.shape}")


def gate_logit(q: Tensor, head: GateHead) -> Tensor:
    """Gate logit(s): ``q @ w + b`` for q of shape [C] or [N, C]."""
    c = head.weight.shape[0]
    if q.shape[-1] != c:
        raise ValueError(f"query width {q.shape[-1]} does not match gate width {c}")
    if q.data.ndim == 1:
        return T.reshape(T.linear(T.reshape(q, (1, c)), head.weight, head.bias), ())
    out = T.linear(q, head.weight, head.bias)
    return T.reshape(out, (q.shape[0],))


def gumbel_from_uniform(u):
    u = np.clip(np.asarray(u, dtype=np.float64), UNIFORM_CLAMP, 1.0 - UNIFORM_CLAMP)
    return -np.log(-np.log(u))


def sample_gumbel_pair(rng: np.random.Generator, n: int | None = None):
    """Two independent Gumbel(0, 1) draws (arrays of length ``n`` if given)."""
    shape = (2,) if n is None else (2, n)
    g = gumbel_from_uniform(rng.random(shape))
    return g[0], g[1]


class StreamNoise:
    """Fresh Gumbel pairs from a sequential generator; not replayable."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng

    def pair(self, key, n):
        return sample_gumbel_pair(self.rng, n)


class GumbelNoise:
    """Gumbel pairs addressed by key on a counter-based (Philox) stream.

    The same ``(seed, key)`` always yields the same draws, so a forward pass
    can be replayed exactly, e.g. for finite-difference checks.
    """

    def __init__(self, seed: int, prefix=(), stream: str = "gate"):
        self.seed = int(seed)
        self.prefix = tuple(int(k) for k in prefix)
        self._salt = zlib.crc32(stream.encode())

    def pair(self, key, n):
        ss = np.random.SeedSequence([self.seed, self._salt, *self.prefix, *[int(k) for k in key]])
        return sample_gumbel_pair(np.random.Generator(np.random.Philox(ss)), n)


class FixedNoise:
    """The same (g0, g1) for every key; broadcast to ``n`` gates."""

    def __init__(self, g0=0.0, g1=0.0):
        self.g0, self.g1 = g0, g1

    def pair(self, key, n):
        return np.broadcast_to(self.g0, (n,)).astype(float), np.broadcast_to(self.g1, (n,)).astype(float)


def gumbel_softmax(logit: Tensor, g0, g1, tau: float = DEFAULT_TAU) -> Tensor:
    """Soft gate value, differentiable w.r.t. ``logit``."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    shift = Tensor(np.broadcast_to(np.asarray(g1, float) - np.asarray(g0, float), logit.shape))
    return T.sigmoid(T.scale(T.add(logit, shift), 1.0 / tau))


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def harden(logit, g0=None, g1=None, mode: GateMode | str = GateMode.STRAIGHT_THROUGH):
    """Hard gate bit(s).

    Straight-through: Gumbel-Max argmax, ties go to 1.  Deterministic: 1 iff
    the logit is positive; noise is ignored.
    """
    mode = GateMode(mode)
    x = np.asarray(logit.data if isinstance(logit, Tensor) else logit, dtype=np.float64)
    if mode is GateMode.DETERMINISTIC:
        return x > 0
    if g0 is None or g1 is None:
        raise ValueError(f"{mode.value} gates need Gumbel noise")
    return _log_sigmoid(x) + g1 >= _log_sigmoid(-x) + g0


@dataclass
class GateSample:
    """Gate state of all N queries at one layer of one frame."""

    logit: np.ndarray
    g0: np.ndarray | None
    g1: np.ndarray | None
    soft: np.ndarray
    hard: np.ndarray
    mode: GateMode
    soft_tensor: Tensor | None = field(default=None, repr=False, compare=False)

    @property
    def active(self) -> int:
        return int(self.hard.sum())


def sample_gates(logits: Tensor, tau: float, mode, noise=None, key=()) -> GateSample:
    mode = GateMode(mode)
    if mode is GateMode.DETERMINISTIC:
        soft = T._stable_sigmoid(logits.data)
        return GateSample(logits.data.copy(), None, None, soft, logits.data > 0, mode)
    if noise is None:
        raise ValueError(f"{mode.value} gates need a noise source")
    g0, g1 = noise.pair(key, logits.shape[0])
    soft_t = gumbel_softmax(logits, g0, g1, tau)
    hard = harden(logits, g0, g1, mode)
    return GateSample(logits.data.copy(), g0, g1, soft_t.data.copy(), hard, mode, soft_t)


def trace_rows(frame: int, layer: int, sample: GateSample) -> list[dict]:
    """JSONL-ready rows; the logit of an ungated (forced open) query is null."""
    return [
        {
            "frame": frame,
            "layer": layer,
            "query": i,
            "logit": float(sample.logit[i]) if np.isfinite(sample.logit[i]) else None,
            "soft": float(sample.soft[i]),
            "hard": int(sample.hard[i]),
        }
        for i in range(len(sample.hard))
    ]
