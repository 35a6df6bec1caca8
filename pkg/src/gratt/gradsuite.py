"""Central finite-difference checks of every primitive op and of full gated layers.

Hard gates are piecewise constant, so layer checks run the gates in soft mode
with frozen Gumbel noise: the rows are blended by the relaxed gate value, which
is exactly the path the straight-through estimator differentiates.
"""

from __future__ import annotations

import numpy as np

from gratt import tensor as T
from gratt.decoder import DecoderConfig, GatePlacement, MaskConfig, decoder_forward, decoder_layer_forward, init_params
from gratt.gating import GateMode, GumbelNoise, gumbel_softmax
from gratt.propagation import TrackState, compute_loss, predict
from gratt.synthworld import GTObject
from gratt.tensor import Tensor

TOLERANCE = 1e-4


def _contract(out: Tensor, rng) -> Tensor:
    """Scalar probe ``sum(out * W)`` with a fixed random W."""
    w = Tensor(rng.normal(size=out.shape))
    return T.total(T.mul(out, w))


def _t(rng, *shape, low=None):
    a = rng.normal(size=shape)
    if low is not None:
        a = low + np.abs(a)
    return Tensor(a)


def _away_from_zero(rng, *shape):
    a = rng.normal(size=shape)
    return Tensor(np.sign(a) * (0.1 + np.abs(a)))


def op_checks(seed: int = 0):
    """(name, fn, inputs) for each primitive op."""
    rng = np.random.default_rng([seed, 1])
    probe = np.random.default_rng([seed, 2])

    def c(f):
        return lambda *xs: _contract(f(*xs), np.random.default_rng([seed, 3]))

    mask = np.zeros((3, 5))
    mask[0, 1] = mask[2, 4] = -np.inf
    idx = np.array([2, 0, 2])
    bits = np.array([True, False, True, False])
    g0, g1 = probe.gumbel(size=4), probe.gumbel(size=4)
    return [
        ("add", c(T.add), [_t(rng, 3, 4), _t(rng, 3, 4)]),
        ("add_scalar", c(T.add), [_t(rng, 3, 4), _t(rng)]),
        ("sub", c(T.sub), [_t(rng, 3, 4), _t(rng, 3, 4)]),
        ("mul", c(T.mul), [_t(rng, 3, 4), _t(rng, 3, 4)]),
        ("scale", c(lambda x: T.scale(x, -1.7)), [_t(rng, 3, 4)]),
        ("sigmoid", c(T.sigmoid), [_t(rng, 3, 4)]),
        ("log", c(T.log), [_t(rng, 3, 4, low=0.2)]),
        ("exp", c(T.exp), [_t(rng, 3, 4)]),
        ("relu", c(T.relu), [_away_from_zero(rng, 3, 4)]),
        ("absolute", c(T.absolute), [_away_from_zero(rng, 3, 4)]),
        ("matmul", c(T.matmul), [_t(rng, 3, 4), _t(rng, 4, 5)]),
        ("matmul_batched", c(T.matmul), [_t(rng, 2, 3, 4), _t(rng, 2, 4, 5)]),
        ("transpose", c(T.transpose), [_t(rng, 2, 3, 4)]),
        ("reshape", c(lambda x: T.reshape(x, (4, 3))), [_t(rng, 3, 4)]),
        ("split_heads", c(lambda x: T.split_heads(x, 2)), [_t(rng, 3, 4)]),
        ("merge_heads", c(T.merge_heads), [_t(rng, 2, 3, 2)]),
        ("add_bias", c(T.add_bias), [_t(rng, 3, 4), _t(rng, 4)]),
        ("linear", c(T.linear), [_t(rng, 3, 4), _t(rng, 4, 5), _t(rng, 5)]),
        ("total", T.total, [_t(rng, 3, 4)]),
        ("mean", T.mean, [_t(rng, 3, 4)]),
        ("softmax_rows", c(lambda x: T.softmax_rows(T.add(x, Tensor(mask)))), [_t(rng, 3, 5)]),
        ("log_softmax_rows", c(T.log_softmax_rows), [_t(rng, 3, 5)]),
        ("layer_norm", c(T.layer_norm), [_t(rng, 3, 6), _t(rng, 6), _t(rng, 6)]),
        ("take_rows", c(lambda x: T.take_rows(x, idx)), [_t(rng, 4, 3)]),
        ("scatter_rows", c(lambda b, v: T.scatter_rows(b, [1, 3], v)), [_t(rng, 4, 3), _t(rng, 2, 3)]),
        ("select_rows", c(lambda a, b: T.select_rows(a, b, bits)), [_t(rng, 4, 3), _t(rng, 4, 3)]),
        ("blend_rows", c(T.blend_rows), [_t(rng, 4, 3), _t(rng, 4, 3), Tensor(probe.uniform(0.1, 0.9, 4))]),
        ("pick", c(lambda x: T.pick(x, [0, 2, 1])), [_t(rng, 3, 4)]),
        ("gumbel_softmax", c(lambda g: gumbel_softmax(g, g0, g1, 0.5)), [_t(rng, 4)]),
    ]


def _small_cfg(**kw) -> DecoderConfig:
    return DecoderConfig(n_queries=4, width=8, n_layers=2, n_heads=2, n_classes=3, gate_bias_init=0.0, **kw)


def _perturb_gates(params, rng):
    # spread the gate logits so both gate values occur and none sits near 0
    for name, p in params.items():
        if name.endswith("gate.w"):
            p.data[:] = rng.normal(0.0, 1.0, p.shape)


def layer_checks(seed: int = 0):
    """Full gated layer / decoder / loss checks on a small model."""
    out = []
    for mask in MaskConfig:
        cfg = _small_cfg(mask_config=mask)
        rng = np.random.default_rng([seed, 11])
        params = init_params(cfg, seed)
        _perturb_gates(params, rng)
        feats, x0, prev = _t(rng, 5, 8), _t(rng, 4, 8), _t(rng, 4, 8)
        noise = GumbelNoise(seed)
        names = sorted(k for k in params if k.startswith("layers.0."))

        def fn(x, q_prev, f, *ps, cfg=cfg, params=params, names=names, noise=noise):
            local = dict(params, **dict(zip(names, ps)))
            y, _ = decoder_layer_forward(x, f, q_prev, cfg, local, 0, GateMode.SOFT, noise)
            return _contract(y, np.random.default_rng([seed, 12]))

        out.append((f"layer[{mask.value}]", fn, [x0, prev, feats, *[params[k] for k in names]]))

    for placement in GatePlacement:
        cfg = _small_cfg(gate_placement=placement, mask_config=MaskConfig.ALL_TO_ALL)
        rng = np.random.default_rng([seed, 13])
        params = init_params(cfg, seed)
        _perturb_gates(params, rng)
        feats, prev = _t(rng, 5, 8), _t(rng, 4, 8)
        names = sorted(params)

        def fn(q_prev, f, *ps, cfg=cfg, names=names):
            local = dict(zip(names, ps))
            y = decoder_forward(f, q_prev, cfg, local, GateMode.SOFT, GumbelNoise(seed), frame=1)
            return _contract(y.queries, np.random.default_rng([seed, 14]))

        out.append((f"decoder[{placement.value}]", fn, [prev, feats, *[params[k] for k in names]]))

    cfg = _small_cfg()
    params = init_params(cfg, seed)
    rng = np.random.default_rng([seed, 15])
    head = sorted(k for k in params if k.startswith("head."))
    gts = [GTObject(0, 2, (0.3, 0.6), 0.15, "visible"), GTObject(1, 1, (0.7, 0.2), 0.1, "occluded")]
    state = TrackState(cfg.n_queries, {1: 0, 3: 1})

    def loss_fn(q, *ps):
        local = dict(params, **dict(zip(head, ps)))
        return compute_loss(predict(q, local), gts, state, (1.0, 5.0))

    out.append(("loss", loss_fn, [_t(rng, 4, 8), *[params[k] for k in head]]))
    return out


def run_suite(seed: int = 0, eps: float = 1e-6) -> list[tuple[str, float]]:
    """(check name, max relative error) for every op and layer check."""
    results = []
    for name, fn, inputs in op_checks(seed) + layer_checks(seed):
        results.append((name, T.grad_check(fn, inputs, eps=eps)))
    return results
