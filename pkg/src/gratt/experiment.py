"""Train/evaluate drivers shared by the CLI and the acceptance suite."""

from __future__ import annotations

import dataclasses
import logging

import numpy as np

from gratt import evalkit as E
from gratt.config import ExperimentConfig
from gratt.decoder import DecoderConfig
from gratt.gating import trace_rows
from gratt.propagation import ClipRun, GRAttModel, propagate_clip, train
from gratt.synthworld import VideoClip, generate_scene

log = logging.getLogger(__name__)

CLIP_COLUMNS = (
    "seed", "scenario", "precision", "recall", "duplicate_rate", "id_switches",
    "gate_rate", "occluded_gate_rate", "visible_gate_rate",
)


def eval_clips(cfg: ExperimentConfig, scenarios=None) -> list[VideoClip]:
    """Seeded evaluation clips; scenarios cycle over ``eval.scenarios``."""
    scenarios = tuple(scenarios or cfg.eval.scenarios)
    clips = []
    for i in range(cfg.eval.seeds):
        seed = cfg.eval.first_seed + i
        spec = dataclasses.replace(
            cfg.scenario,
            scenario=scenarios[i % len(scenarios)],
            width=cfg.decoder.width,
            n_classes=cfg.decoder.n_classes,
            max_objects=cfg.decoder.n_queries,
        )
        clips.append(generate_scene(spec, seed))
    return clips


def train_model(cfg: ExperimentConfig, decoder: DecoderConfig | None = None, on_step=None):
    model = GRAttModel.create(decoder or cfg.decoder, cfg.seed)
    tc = dataclasses.replace(cfg.train, seed=cfg.seed)
    rows = train(model, tc, on_step=on_step)
    return model, rows


def clip_row(run: ClipRun, clip: VideoClip, threshold: float) -> dict:
    m = E.evaluate_run(run, clip, threshold)
    gates = run.gate_log()
    row = {"seed": clip.seed, "scenario": clip.spec.scenario, **m, "gate_rate": float(gates.mean())}
    occ = clip.occluded_frames()
    if occ and len(occ) < clip.n_frames:
        row["occluded_gate_rate"], row["visible_gate_rate"] = E.occlusion_gate_contrast(gates, occ)
    else:
        row["occluded_gate_rate"] = row["visible_gate_rate"] = float("nan")
    return row


def evaluate(model: GRAttModel, clips: list[VideoClip], threshold: float = E.MATCH_THRESHOLD):
    """Per-clip metric rows and the runs that produced them (deterministic gates)."""
    rows, runs = [], []
    for clip in clips:
        run = propagate_clip(clip, model, "eval")
        rows.append(clip_row(run, clip, threshold))
        runs.append(run)
    return rows, runs


def summarize(rows: list[dict]) -> dict:
    """Medians of ID switches and recall plus means of the remaining columns."""
    out = {"n_clips": len(rows)}
    for k in ("id_switches", "recall"):
        out[f"median_{k}"] = float(np.median([r[k] for r in rows]))
    for k in ("precision", "recall", "duplicate_rate", "id_switches", "gate_rate"):
        out[f"mean_{k}"] = float(np.mean([r[k] for r in rows]))
    return out


def gate_series(runs: list[ClipRun], clips: list[VideoClip]) -> list[dict]:
    rows = []
    for run, clip in zip(runs, clips):
        for r in E.gate_series_rows(run.gate_log()):
            rows.append({"seed": clip.seed, **r})
    return rows


def gate_traces(runs: list[ClipRun], clips: list[VideoClip]) -> list[dict]:
    rows = []
    for run, clip in zip(runs, clips):
        for t, frame in enumerate(run.gate_samples):
            for l, sample in enumerate(frame):
                rows += [{"seed": clip.seed, **r} for r in trace_rows(t, l, sample)]
    return rows


def occlusion_wins(rows: list[dict]) -> tuple[int, int]:
    """(clips whose occluded-frame gate rate is below the visible-frame rate, clips counted)."""
    pairs = [(r["occluded_gate_rate"], r["visible_gate_rate"]) for r in rows if np.isfinite(r["occluded_gate_rate"])]
    return sum(o < v for o, v in pairs), len(pairs)
