"""Synthetic occlusion world: moving disks on the unit square and a fixed encoder.

A clip is fully determined by its :class:`ScenarioSpec` and seed.  Frame
features are a G x G grid of tokens; each token carries a sinusoidal 2D
positional code plus a Gaussian-weighted class embedding for every *visible*
object.  Occlusion deletes an object's signal outright.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from gratt.tensor import Tensor

SCENARIOS = ("occlusion", "crossing", "birth_death", "noise_burst", "calm")
VISIBLE, OCCLUDED, ABSENT = "visible", "occluded", "absent"
RADIUS_RANGE = (0.03, 0.2)
WORLD_SEED = 1729
CLASS_GAIN = 1.5


@dataclass
class ScenarioSpec:
    scenario: str = "calm"
    n_objects: int = 2
    n_frames: int = 12
    shock_start: int = 4
    shock_end: int = 6  # inclusive
    noise: float = 0.05
    burst_noise: float = 1.0
    n_classes: int = 3
    max_objects: int = 8
    grid: int = 4
    width: int = 32
    min_radius: float = 0.12
    max_radius: float = 0.2
    min_speed: float = 0.02
    max_speed: float = 0.05

    def validate(self) -> None:
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.n_frames < 1 or self.n_objects < 0:
            raise ValueError("need n_frames >= 1 and n_objects >= 0")
        if self.n_objects > self.max_objects:
            raise ValueError(f"{self.n_objects} objects exceed the {self.max_objects} available queries")
        if self.scenario != "calm" and not 0 <= self.shock_start <= self.shock_end < self.n_frames:
            raise ValueError(f"shock interval [{self.shock_start}, {self.shock_end}] outside clip of {self.n_frames} frames")
        if self.scenario in ("occlusion",) and self.n_objects < 1:
            raise ValueError("occlusion needs at least one object")
        if self.scenario in ("crossing", "birth_death") and self.n_objects < 2:
            raise ValueError(f"{self.scenario} needs at least two objects")
        lo, hi = RADIUS_RANGE
        if not lo <= self.min_radius <= self.max_radius <= hi:
            raise ValueError(f"radii must lie in [{lo}, {hi}]")
        if self.width % 4:
            raise ValueError("feature width must be a multiple of 4")

    def intervals(self) -> range:
        return range(self.shock_start, self.shock_end + 1)


@dataclass
class ObjectTrack:
    instance_id: int
    cls: int  # 1..K
    centers: np.ndarray  # [F, 2]
    radii: np.ndarray  # [F]
    visibility: list[str]

    def present(self, t: int) -> bool:
        return self.visibility[t] != ABSENT

    def visible(self, t: int) -> bool:
        return self.visibility[t] == VISIBLE


@dataclass(frozen=True)
class GTObject:
    instance_id: int
    cls: int
    center: tuple[float, float]
    radius: float
    visibility: str

    @property
    def visible(self) -> bool:
        return self.visibility == VISIBLE

    @property
    def present(self) -> bool:
        return self.visibility != ABSENT


@dataclass
class VideoClip:
    spec: ScenarioSpec
    seed: int
    tracks: list[ObjectTrack]
    features: list[np.ndarray] = field(repr=False)

    @property
    def n_frames(self) -> int:
        return self.spec.n_frames

    def frame_features(self, t: int) -> Tensor:
        return Tensor(self.features[t])

    def ground_truth(self, t: int) -> list[GTObject]:
        return [
            GTObject(tr.instance_id, tr.cls, (float(tr.centers[t, 0]), float(tr.centers[t, 1])), float(tr.radii[t]), tr.visibility[t])
            for tr in self.tracks
        ]

    def occluded_frames(self) -> list[int]:
        return [t for t in range(self.n_frames) if any(tr.visibility[t] == OCCLUDED for tr in self.tracks)]


# ---------------------------------------------------------------------------
# encoder


def token_positions(grid: int) -> np.ndarray:
    """[G*G, 2] token centres, row-major with x varying fastest."""
    c = (np.arange(grid) + 0.5) / grid
    ys, xs = np.meshgrid(c, c, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def positional_encoding(pos: np.ndarray, width: int) -> np.ndarray:
    """Sinusoidal code: width/2 dims per axis, sin and cos at width/4 frequencies."""
    nf = width // 4
    freqs = np.pi * np.geomspace(0.5, 8.0, nf)
    parts = []
    for axis in range(2):
        ang = pos[:, axis : axis + 1] * freqs[None, :]
        parts += [np.sin(ang), np.cos(ang)]
    return np.concatenate(parts, axis=1)


def class_embeddings(n_classes: int, width: int) -> np.ndarray:
    """Fixed random embeddings, row k for class k+1; not trainable."""
    rng = np.random.default_rng([WORLD_SEED, n_classes, width])
    return CLASS_GAIN * rng.normal(0.0, 1.0, (n_classes, width))


def gaussian_weights(tokens: np.ndarray, center, radius: float) -> np.ndarray:
    d2 = ((tokens - np.asarray(center)[None, :]) ** 2).sum(axis=1)
    return np.exp(-d2 / radius**2)


def encode_frame(objects, spec: ScenarioSpec, rng: np.random.Generator | None, noise: float | None = None) -> np.ndarray:
    """Encode one frame. ``objects`` is an iterable of (cls, center, radius, visible)."""
    tokens = token_positions(spec.grid)
    feats = positional_encoding(tokens, spec.width)
    emb = class_embeddings(spec.n_classes, spec.width)
    for cls, center, radius, visible in objects:
        if visible:
            feats = feats + gaussian_weights(tokens, center, radius)[:, None] * emb[cls - 1][None, :]
    amp = spec.noise if noise is None else noise
    if amp > 0 and rng is not None:
        feats = feats + rng.normal(0.0, amp, feats.shape)
    return feats


# ---------------------------------------------------------------------------
# scenes

_LO, _HI = 0.1, 0.9


def _reflect(x: np.ndarray) -> np.ndarray:
    """Fold coordinates back into [_LO, _HI] (piecewise-linear bouncing)."""
    span = _HI - _LO
    y = np.mod(x - _LO, 2 * span)
    return _LO + np.where(y > span, 2 * span - y, y)


def _velocity(rng, spec: ScenarioSpec) -> np.ndarray:
    ang = rng.uniform(0, 2 * np.pi)
    speed = rng.uniform(spec.min_speed, spec.max_speed)
    return speed * np.array([np.cos(ang), np.sin(ang)])


def generate_scene(spec: ScenarioSpec, seed: int) -> VideoClip:
    spec.validate()
    rng = np.random.default_rng([seed, 0])
    f = spec.n_frames
    t = np.arange(f)[:, None]
    tracks = []
    for k in range(spec.n_objects):
        cls = int(rng.integers(1, spec.n_classes + 1))
        radius = float(rng.uniform(spec.min_radius, spec.max_radius))
        start = rng.uniform(0.2, 0.8, 2)
        vel = _velocity(rng, spec)
        centers = _reflect(start[None, :] + t * vel[None, :])
        tracks.append(ObjectTrack(k, cls, centers, np.full(f, radius), [VISIBLE] * f))

    shock = spec.intervals()
    if spec.scenario == "occlusion":
        for i in shock:
            tracks[0].visibility[i] = OCCLUDED
    elif spec.scenario == "crossing":
        meet_t = f // 2
        meet = rng.uniform(0.35, 0.65, 2)
        v0 = _velocity(rng, spec)
        ang = rng.uniform(0.5 * np.pi, 1.5 * np.pi)
        rot = np.array([[np.cos(ang), -np.sin(ang)], [np.sin(ang), np.cos(ang)]])
        v1 = rot @ v0
        for tr, v in ((tracks[0], v0), (tracks[1], v1)):
            tr.centers = np.clip(meet[None, :] + (t - meet_t) * v[None, :], 0.0, 1.0)
    elif spec.scenario == "birth_death":
        for i in range(f):
            if i < spec.shock_start:
                tracks[0].visibility[i] = ABSENT
            if i > spec.shock_end:
                tracks[1].visibility[i] = ABSENT
    return VideoClip(spec, seed, tracks, _encode_clip(spec, seed, tracks))


def frame_noise(spec: ScenarioSpec, t: int) -> float:
    if spec.scenario == "noise_burst" and t in spec.intervals():
        return spec.burst_noise
    return spec.noise


def _encode_clip(spec: ScenarioSpec, seed: int, tracks: list[ObjectTrack]) -> list[np.ndarray]:
    out = []
    for i in range(spec.n_frames):
        objs = [(tr.cls, tr.centers[i], tr.radii[i], tr.visible(i)) for tr in tracks]
        rng = np.random.default_rng([seed, 1, i])
        out.append(encode_frame(objs, spec, rng, frame_noise(spec, i)))
    return out


# ---------------------------------------------------------------------------
# JSONL


def clip_records(clip: VideoClip) -> list[dict]:
    rows: list[dict] = [{"spec": asdict(clip.spec), "seed": clip.seed}]
    for i in range(clip.n_frames):
        rows.append(
            {
                "frame": i,
                "tracks": [
                    {
                        "id": tr.instance_id,
                        "class": tr.cls,
                        "center": [float(v) for v in tr.centers[i]],
                        "radius": float(tr.radii[i]),
                        "visibility": tr.visibility[i],
                    }
                    for tr in clip.tracks
                ],
            }
        )
    return rows


def save_clips(path: Path | str, clips: list[VideoClip], header: dict | None = None) -> None:
    """One JSONL block per clip: a spec/seed line then one line per frame."""
    with open(path, "w", encoding="utf-8") as fh:
        if header is not None:
            fh.write(json.dumps({"config": header}, sort_keys=True) + "\n")
        for clip in clips:
            for row in clip_records(clip):
                fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_clips(path: Path | str) -> list[VideoClip]:
    """Regenerate clips from their stored spec and seed and check the tracks agree."""
    clips: list[VideoClip] = []
    expected: list[dict] = []

    def finish():
        if clips:
            got = clip_records(clips[-1])[1:]
            if json.loads(json.dumps(got)) != expected:
                raise ValueError(f"stored tracks of clip seed {clips[-1].seed} do not match regeneration")

    with open(path, encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            if "config" in row:
                continue
            if "spec" in row:
                finish()
                clips.append(generate_scene(ScenarioSpec(**row["spec"]), row["seed"]))
                expected = []
            else:
                expected.append(row)
    finish()
    return clips
