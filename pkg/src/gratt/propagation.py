"""Frame-to-frame query propagation, instance binding, loss and training."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from gratt import tensor as T
from gratt.decoder import DecoderConfig, DecoderOutput, decoder_forward, init_params
from gratt.gating import GateMode, GateSample, GumbelNoise
from gratt.synthworld import GTObject, ScenarioSpec, VideoClip, generate_scene
from gratt.tensor import Tensor

log = logging.getLogger(__name__)

RADIUS_SCALE = 0.25
MATCH_TOL = 1e-9


# ---------------------------------------------------------------------------
# Hungarian matching


def _hungarian_rows(cost: np.ndarray) -> list[int]:
    """Min-cost assignment for n rows <= m columns (shortest augmenting paths)."""
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    p = np.zeros(m + 1, dtype=int)
    way = np.zeros(m + 1, dtype=int)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    rows = [-1] * n
    for j in range(1, m + 1):
        if p[j]:
            rows[p[j] - 1] = j - 1
    return rows


def _optimal_value(cost: np.ndarray) -> float:
    if cost.size == 0:
        return 0.0
    if cost.shape[0] > cost.shape[1]:
        cost = cost.T
    rows = _hungarian_rows(cost)
    return float(sum(cost[i, j] for i, j in enumerate(rows)))


def hungarian_match(cost) -> dict[int, int]:
    """Optimal row->column assignment of min(m, n) pairs.

    Among optimal assignments the lexicographically smallest one is returned,
    reading the assignment as the column of each row in order (an unassigned
    row sorts after every column).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be a matrix, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix has non-finite entries")
    n, m = cost.shape
    k = min(n, m)
    best = _optimal_value(cost)
    tol = MATCH_TOL * max(1.0, abs(best))
    out: dict[int, int] = {}
    spent = 0.0
    cols = list(range(m))
    for r in range(n):
        rest = np.arange(r + 1, n)
        placed = False
        for c in cols:
            remaining = [j for j in cols if j != c]
            sub = cost[np.ix_(rest, remaining)]
            if len(out) + 1 + min(len(rest), len(remaining)) < k:
                continue
            if abs(spent + cost[r, c] + _optimal_value(sub) - best) <= tol:
                out[r] = c
                spent += cost[r, c]
                cols = remaining
                placed = True
                break
        if not placed and cols and len(out) + min(len(rest), len(cols)) < k:
            raise RuntimeError("tie-break search lost the optimum")
    return out


# ---------------------------------------------------------------------------
# binding


@dataclass
class TrackState:
    n_queries: int
    binding: dict[int, int] = field(default_factory=dict)  # query -> instance id

    def free(self) -> list[int]:
        return [q for q in range(self.n_queries) if q not in self.binding]

    def bound_instances(self) -> set[int]:
        return set(self.binding.values())

    def query_of(self, instance_id: int) -> int | None:
        for q, inst in self.binding.items():
            if inst == instance_id:
                return q
        return None

    def bind(self, query: int, instance_id: int) -> None:
        if query in self.binding:
            raise ValueError(f"query {query} is already bound to instance {self.binding[query]}")
        if instance_id in self.bound_instances():
            raise ValueError(f"instance {instance_id} is already bound")
        self.binding[query] = instance_id

    def copy(self) -> "TrackState":
        return TrackState(self.n_queries, dict(self.binding))


@dataclass
class Prediction:
    log_probs: Tensor  # [N, K+1], last column = no-object
    center: Tensor  # [N, 2]
    radius: Tensor  # [N]

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.data)

    def labels(self) -> np.ndarray:
        """Predicted class per query, 1..K, or 0 for no-object."""
        k = self.log_probs.shape[1] - 1
        arg = self.log_probs.data.argmax(axis=1)
        return np.where(arg == k, 0, arg + 1)


def predict(queries: Tensor, params: dict[str, Tensor]) -> Prediction:
    h = T.layer_norm(queries, params["head.ln.g"], params["head.ln.b"])
    logits = T.linear(h, params["head.cls.w"], params["head.cls.b"])
    center = T.sigmoid(T.linear(h, params["head.center.w"], params["head.center.b"]))
    r = T.sigmoid(T.linear(h, params["head.radius.w"], params["head.radius.b"]))
    radius = T.scale(T.reshape(r, (queries.shape[0],)), RADIUS_SCALE)
    return Prediction(T.log_softmax_rows(logits), center, radius)


def matching_cost(gts: list[GTObject], queries: list[int], pred: Prediction, lambda_pos: float = 1.0) -> np.ndarray:
    """-log p(class) + lambda_pos * L1 centre distance, gts x queries."""
    lp = pred.log_probs.data
    cen = pred.center.data
    cost = np.empty((len(gts), len(queries)))
    for i, g in enumerate(gts):
        for j, q in enumerate(queries):
            cost[i, j] = -lp[q, g.cls - 1] + lambda_pos * np.abs(cen[q] - np.asarray(g.center)).sum()
    return cost


def assign_new_objects(gt_frame: list[GTObject], state: TrackState, pred: Prediction, lambda_pos: float = 1.0) -> TrackState:
    """Bind visible, not-yet-bound instances to free queries only (in place)."""
    bound = state.bound_instances()
    new = [g for g in gt_frame if g.visible and g.instance_id not in bound]
    if not new:
        return state
    free = state.free()
    if not free:
        log.info("no free queries for %d new instance(s)", len(new))
        return state
    pairs = hungarian_match(matching_cost(new, free, pred, lambda_pos))
    for i, j in pairs.items():
        state.bind(free[j], new[i].instance_id)
    if len(pairs) < len(new):
        log.info("%d new instance(s) left unmatched: too few free queries", len(new) - len(pairs))
    return state


# ---------------------------------------------------------------------------
# loss


def class_targets(gt_frame: list[GTObject], state: TrackState, n_classes: int) -> np.ndarray:
    present = {g.instance_id: g for g in gt_frame if g.present}
    targets = np.full(state.n_queries, n_classes, dtype=int)
    for q, inst in state.binding.items():
        if inst in present:
            targets[q] = present[inst].cls - 1
    return targets


def loss_terms(pred: Prediction, gt_frame: list[GTObject], state: TrackState) -> tuple[Tensor, Tensor | None]:
    """(mean cross-entropy over all queries, mean L1 over bound visible instances or None)."""
    n_classes = pred.log_probs.shape[1] - 1
    targets = class_targets(gt_frame, state, n_classes)
    ce = T.scale(T.total(T.pick(pred.log_probs, targets)), -1.0 / state.n_queries)
    visible = {g.instance_id: g for g in gt_frame if g.visible}
    rows, goal = [], []
    for q, inst in sorted(state.binding.items()):
        if inst in visible:
            g = visible[inst]
            rows.append(q)
            goal.append([g.center[0], g.center[1], g.radius])
    if not rows:
        return ce, None
    goal = np.asarray(goal)
    dc = T.absolute(T.sub(T.take_rows(pred.center, rows), Tensor(goal[:, :2])))
    dr = T.absolute(T.sub(T.take_rows(T.reshape(pred.radius, (-1, 1)), rows), Tensor(goal[:, 2:])))
    pos = T.scale(T.add(T.total(dc), T.total(dr)), 1.0 / len(rows))
    return ce, pos


def compute_loss(pred: Prediction, gt_frame: list[GTObject], state: TrackState, weights=(1.0, 1.0)) -> Tensor:
    lam_cls, lam_pos = weights
    ce, pos = loss_terms(pred, gt_frame, state)
    total = T.scale(ce, lam_cls)
    if pos is not None:
        total = T.add(total, T.scale(pos, lam_pos))
    return total


# ---------------------------------------------------------------------------
# model and clip propagation


@dataclass
class GRAttModel:
    cfg: DecoderConfig
    params: dict[str, Tensor]

    @classmethod
    def create(cls, cfg: DecoderConfig, seed: int) -> "GRAttModel":
        return cls(cfg, init_params(cfg, seed))


@dataclass
class ClipRun:
    predictions: list[Prediction] = field(default_factory=list)
    gate_samples: list[list[GateSample]] = field(default_factory=list)
    states: list[TrackState] = field(default_factory=list)
    final_queries: list[Tensor] = field(default_factory=list)
    loss: Tensor | None = None
    cls_loss: float = 0.0
    pos_loss: float = 0.0

    def gate_log(self) -> np.ndarray:
        """[frames, rows, N] hard gate bits."""
        return np.stack([np.stack([s.hard for s in frame]) for frame in self.gate_samples]).astype(np.int8)


def propagate_clip(
    clip: VideoClip,
    model: GRAttModel,
    mode: str = "eval",
    noise=None,
    weights=None,
    lambda_match: float = 1.0,
    gate_mode=None,
) -> ClipRun:
    """Run the decoder over a clip, carrying final queries from frame to frame.

    ``mode="train"`` samples straight-through gates from ``noise``; ``"eval"``
    uses the config's inference rule.  With ``weights`` the per-frame losses are
    summed into ``run.loss``.
    """
    if clip.n_frames < 1:
        raise ValueError("empty clip")
    cfg, params = model.cfg, model.params
    if gate_mode is None:
        gate_mode = GateMode.STRAIGHT_THROUGH if mode == "train" else cfg.eval_gate_mode
    gate_mode = GateMode(gate_mode)
    if gate_mode is not GateMode.DETERMINISTIC and noise is None and cfg.gating_enabled:
        raise ValueError(f"{gate_mode.value} gates need a noise source")
    run = ClipRun()
    state = TrackState(cfg.n_queries)
    q_prev = params["query_embed"]
    terms = []
    for t in range(clip.n_frames):
        out: DecoderOutput = decoder_forward(clip.frame_features(t), q_prev, cfg, params, gate_mode, noise, frame=t)
        pred = predict(out.queries, params)
        gt = clip.ground_truth(t)
        assign_new_objects(gt, state, pred, lambda_match)
        if weights is not None:
            ce, pos = loss_terms(pred, gt, state)
            run.cls_loss += ce.item()
            run.pos_loss += 0.0 if pos is None else pos.item()
            frame_loss = T.scale(ce, weights[0])
            if pos is not None:
                frame_loss = T.add(frame_loss, T.scale(pos, weights[1]))
            terms.append(frame_loss)
        run.predictions.append(pred)
        run.gate_samples.append(out.samples)
        run.states.append(state.copy())
        run.final_queries.append(out.queries)
        q_prev = out.queries
    if terms:
        loss = terms[0]
        for term in terms[1:]:
            loss = T.add(loss, term)
        run.loss = loss
    return run


# ---------------------------------------------------------------------------
# training


DEFAULT_MIX = ("occlusion", "crossing", "birth_death")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    steps: int = 3000
    clip_length: int = 12
    batch: int = 1
    lambda_cls: float = 1.0
    lambda_pos: float = 5.0
    lambda_match: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    scenarios: tuple[str, ...] = DEFAULT_MIX
    min_objects: int = 2
    max_objects: int = 3

    def __post_init__(self):
        self.scenarios = tuple(self.scenarios)
        if self.lr < 0 or self.steps < 0 or self.clip_length < 1 or self.batch < 1:
            raise ValueError("lr, steps must be >= 0 and clip_length, batch >= 1")
        if self.lambda_cls < 0 or self.lambda_pos < 0:
            raise ValueError("loss weights must be non-negative")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, last_good: dict[str, np.ndarray]):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.last_good = last_good


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.data -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def sample_training_clip(tc: TrainConfig, step: int, index: int, width: int, n_classes: int, max_queries: int) -> VideoClip:
    rng = np.random.default_rng([tc.seed, 7, step, index])
    scenario = tc.scenarios[int(rng.integers(len(tc.scenarios)))]
    n_obj = int(rng.integers(tc.min_objects, tc.max_objects + 1))
    f = tc.clip_length
    start = int(rng.integers(1, max(2, f - 4)))
    spec = ScenarioSpec(
        scenario=scenario,
        n_objects=n_obj,
        n_frames=f,
        shock_start=min(start, f - 1),
        shock_end=min(start + 2, f - 1),
        n_classes=n_classes,
        max_objects=max_queries,
        width=width,
    )
    return generate_scene(spec, int(rng.integers(2**31)))


METRIC_COLUMNS = ("step", "loss", "cls_loss", "pos_loss", "gate_rate", "grad_norm")


def train(model: GRAttModel, tc: TrainConfig, clips=None, on_step=None) -> list[dict]:
    """Adam on summed per-frame clip losses; returns one metric row per step.

    ``clips`` overrides the sampled scenario mix: a callable ``(step, index)
    -> VideoClip``.  Gates get no loss term of their own.
    """
    cfg, params = model.cfg, model.params
    opt = Adam(params, tc.lr, (tc.beta1, tc.beta2), tc.adam_eps)
    rows = []
    weights = (tc.lambda_cls, tc.lambda_pos)
    for step in range(tc.steps):
        last_good = {k: p.data.copy() for k, p in params.items()}
        for p in params.values():
            p.grad = None
        loss_val = cls_val = pos_val = 0.0
        gate_bits = []
        for b in range(tc.batch):
            clip = clips(step, b) if clips is not None else sample_training_clip(
                tc, step, b, cfg.width, cfg.n_classes, cfg.n_queries
            )
            noise = GumbelNoise(tc.seed, prefix=(step, b))
            try:
                with T.Tape() as tape:
                    run = propagate_clip(clip, model, "train", noise, weights, tc.lambda_match)
                    loss = T.scale(run.loss, 1.0 / tc.batch)
            except T.NonFiniteError:
                raise TrainingDiverged(step, last_good) from None
            if not math.isfinite(loss.item()):
                raise TrainingDiverged(step, last_good)
            tape.backward(loss)
            loss_val += loss.item()
            cls_val += run.cls_loss / tc.batch
            pos_val += run.pos_loss / tc.batch
            gate_bits.append(run.gate_log())
        grads = {k: (np.zeros_like(p.data) if p.grad is None else p.grad) for k, p in params.items()}
        gnorm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
        if not math.isfinite(gnorm):
            raise TrainingDiverged(step, last_good)
        if tc.grad_clip and gnorm > tc.grad_clip:
            grads = {k: g * (tc.grad_clip / gnorm) for k, g in grads.items()}
        if tc.lr > 0:
            opt.step(grads)
        row = {
            "step": step,
            "loss": loss_val,
            "cls_loss": cls_val,
            "pos_loss": pos_val,
            "gate_rate": float(np.mean([g.mean() for g in gate_bits])),
            "grad_norm": gnorm,
        }
        rows.append(row)
        if on_step is not None:
            on_step(row)
    return rows
