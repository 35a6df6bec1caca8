"""Tracking metrics, gate-activation series and exact decoder FLOPs accounting."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from gratt.decoder import DecoderConfig, GatePlacement, MaskConfig
from gratt.synthworld import GTObject

log = logging.getLogger(__name__)

MATCH_THRESHOLD = 0.1


@dataclass(frozen=True)
class Detection:
    query: int
    cls: int
    center: tuple[float, float]


def detections(pred) -> list[Detection]:
    """Queries whose argmax is an object class."""
    labels = pred.labels()
    cen = pred.center.data
    return [Detection(int(q), int(labels[q]), (float(cen[q, 0]), float(cen[q, 1]))) for q in np.flatnonzero(labels)]


def _candidates(dets, gts, threshold):
    out = []
    for g in gts:
        if not g.visible:
            continue
        for d in dets:
            if d.cls != g.cls:
                continue
            dist = float(np.hypot(d.center[0] - g.center[0], d.center[1] - g.center[1]))
            if dist < threshold:
                out.append((dist, g.instance_id, d.query))
    return out


def match_frame(dets: list[Detection], gts: list[GTObject], threshold: float = MATCH_THRESHOLD) -> dict[int, int]:
    """Greedy one-to-one matching of visible gt instances to detections.

    Pairs need equal class and centre distance below ``threshold``; closest
    pairs are taken first.  Returns instance id -> query index.
    """
    taken_q, out = set(), {}
    for _, inst, q in sorted(_candidates(dets, gts, threshold)):
        if inst in out or q in taken_q:
            continue
        out[inst] = q
        taken_q.add(q)
    return out


def id_switches(assignments: list[dict[int, int]]) -> int:
    """Count frames where an instance is matched to a different query than last time."""
    last: dict[int, int] = {}
    switches = 0
    for frame in assignments:
        for inst, q in frame.items():
            if inst in last and last[inst] != q:
                switches += 1
            last[inst] = q
    return switches


def track_metrics(dets_per_frame, gts_per_frame, threshold: float = MATCH_THRESHOLD) -> dict[str, float]:
    """Frame-averaged precision and recall plus the duplicate-frame rate.

    Precision of a frame without detections is 1 (empty set); recall is
    averaged over frames with at least one visible instance.
    """
    precision, recall, dup = [], [], []
    for dets, gts in zip(dets_per_frame, gts_per_frame):
        matched = match_frame(dets, gts, threshold)
        n_vis = sum(g.visible for g in gts)
        if dets:
            precision.append(len(matched) / len(dets))
        else:
            precision.append(1.0)
            log.debug("frame without detections: precision taken as 1")
        if n_vis:
            recall.append(len(matched) / n_vis)
        hits: dict[int, int] = {}
        for _, inst, _q in _candidates(dets, gts, threshold):
            hits[inst] = hits.get(inst, 0) + 1
        dup.append(any(c >= 2 for c in hits.values()))
    return {
        "precision": float(np.mean(precision)) if precision else 1.0,
        "recall": float(np.mean(recall)) if recall else 1.0,
        "duplicate_rate": float(np.mean(dup)) if dup else 0.0,
    }


def evaluate_run(run, clip, threshold: float = MATCH_THRESHOLD) -> dict[str, float]:
    dets = [detections(p) for p in run.predictions]
    gts = [clip.ground_truth(t) for t in range(clip.n_frames)]
    out = track_metrics(dets, gts, threshold)
    out["id_switches"] = id_switches([match_frame(d, g, threshold) for d, g in zip(dets, gts)])
    return out


# ---------------------------------------------------------------------------
# gate activation


def gate_activation_stats(gate_log) -> dict[str, np.ndarray]:
    """``gate_log`` is [frames, rows, N] bits; returns active fractions per frame and per row."""
    g = np.asarray(gate_log, dtype=float)
    if g.ndim == 2:
        g = g[:, None, :]
    return {"per_frame": g.mean(axis=(1, 2)), "per_layer": g.mean(axis=2)}


def gate_series_rows(gate_log) -> list[dict]:
    stats = gate_activation_stats(gate_log)
    rows = []
    for t, per_layer in enumerate(stats["per_layer"]):
        for l, frac in enumerate(per_layer):
            rows.append({"frame": t, "layer": l, "active_fraction": float(frac)})
    return rows


def occlusion_gate_contrast(gate_log, occluded_frames) -> tuple[float, float]:
    """Mean active fraction over occluded frames and over the remaining frames."""
    per_frame = gate_activation_stats(gate_log)["per_frame"]
    occ = np.zeros(len(per_frame), dtype=bool)
    occ[list(occluded_frames)] = True
    if not occ.any() or occ.all():
        raise ValueError("need both occluded and visible frames")
    return float(per_frame[occ].mean()), float(per_frame[~occ].mean())


# ---------------------------------------------------------------------------
# FLOPs

BUCKETS = ("q_proj", "kv_proj", "scores", "weighted_sum", "out_proj", "cross_attn", "ffn")
SELF_ATTN_ROW_BUCKETS = ("q_proj", "scores", "weighted_sum", "out_proj")


def mm(m: int, k: int, n: int) -> int:
    """FLOPs of an [m,k] x [k,n] product; one multiply-accumulate = 2 FLOPs."""
    return 2 * m * k * n


def layer_flops(cfg: DecoderConfig, n_tokens: int, active: int) -> dict[str, int]:
    """FLOPs of one decoder layer with ``active`` rows entering self-attention and FFN.

    Only matrix products are counted; norms, biases and softmax are ignored.
    The gate head is reported separately (see ``FlopsReport.gate_head``).
    Self-attention keys and values always cover all N queries, and are skipped
    only when no row attends at all.
    """
    n, c = cfg.n_queries, cfg.width
    hidden = cfg.ffn_mult * c
    k = active
    return {
        "cross_attn": mm(n, c, c) + 2 * mm(n_tokens, c, c) + mm(n, c, n_tokens) + mm(n, n_tokens, c) + mm(n, c, c),
        "q_proj": mm(k, c, c),
        "kv_proj": 2 * mm(n, c, c) if k > 0 else 0,
        "scores": mm(k, c, n),
        "weighted_sum": mm(k, n, c),
        "out_proj": mm(k, c, c),
        "ffn": mm(k, c, hidden) + mm(k, hidden, c),
    }


@dataclass
class FlopsReport:
    layers: list[dict] = field(default_factory=list)  # one entry per (frame, layer)
    totals: dict[str, int] = field(default_factory=dict)
    total: int = 0
    ungated_total: int = 0
    gate_head: int = 0  # gate logit products, outside the decoder buckets

    @property
    def ratio(self) -> float:
        return self.total / self.ungated_total if self.ungated_total else float("nan")

    def row_dependent_self_attention(self) -> int:
        return sum(self.totals.get(b, 0) for b in SELF_ATTN_ROW_BUCKETS)

    def to_json(self) -> dict:
        return {
            "layers": self.layers,
            "totals": self.totals,
            "total": self.total,
            "ungated_total": self.ungated_total,
            "gate_head": self.gate_head,
            "ratio": self.ratio,
        }


def _active_rows(cfg: DecoderConfig, gate_log: np.ndarray) -> np.ndarray:
    """[frames, L] count of rows that run self-attention and FFN."""
    frames = gate_log.shape[0]
    full = np.full((frames, cfg.n_layers), cfg.n_queries)
    if (
        cfg.gating_enabled
        and cfg.gate_placement is GatePlacement.INTER_ATTENTION
        and cfg.mask_config is MaskConfig.ONE_TO_ZERO
    ):
        return gate_log.sum(axis=2).astype(int)
    return full


def _gate_rows(cfg: DecoderConfig) -> set[int]:
    if not cfg.gating_enabled:
        return set()
    if cfg.gate_placement is GatePlacement.INTER_FRAME:
        return {cfg.n_layers - 1}
    return set(range(cfg.n_layers))


def _count(cfg: DecoderConfig, active: np.ndarray, n_tokens: int) -> tuple[list[dict], dict[str, int]]:
    layers, totals = [], dict.fromkeys(BUCKETS, 0)
    for t in range(active.shape[0]):
        for l in range(cfg.n_layers):
            k = int(active[t, l])
            f = layer_flops(cfg, n_tokens, k)
            for b, v in f.items():
                totals[b] += v
            layers.append({"frame": t, "layer": l, "active": k, **f, "total": sum(f.values())})
    return layers, totals


def flops_count(cfg: DecoderConfig, gate_log, n_tokens: int = 16) -> FlopsReport:
    """Exact integer FLOPs for a recorded gate log ([frames, rows, N] bits)."""
    gate_log = np.asarray(gate_log)
    if gate_log.ndim != 3 or gate_log.shape[2] != cfg.n_queries:
        raise ValueError(f"gate log must be [frames, rows, {cfg.n_queries}], got {gate_log.shape}")
    layers, totals = _count(cfg, _active_rows(cfg, gate_log), n_tokens)
    frames = gate_log.shape[0]
    base = DecoderConfig(
        n_queries=cfg.n_queries, width=cfg.width, n_layers=cfg.n_layers, n_heads=cfg.n_heads,
        n_classes=cfg.n_classes, ffn_mult=cfg.ffn_mult, gating_enabled=False, mask_config=MaskConfig.ALL_TO_ALL,
    )
    _, base_totals = _count(base, np.full((frames, cfg.n_layers), cfg.n_queries), n_tokens)
    gate_head = frames * len(_gate_rows(cfg)) * mm(cfg.n_queries, cfg.width, 1)
    return FlopsReport(layers, totals, sum(totals.values()), sum(base_totals.values()), gate_head)
