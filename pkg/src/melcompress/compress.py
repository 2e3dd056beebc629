"""Iterative pruning: global magnitude weight pruning, head pruning, FFN-unit pruning.

Every technique alternates one prune step with retraining of the pruned
network. Weight pruning keeps binary masks on the block linear layers; head
and FFN pruning remove rows/columns physically.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .corpus import Utterance
from .encoder import (
    DivergenceError,
    EncoderWeights,
    eval_loss,
    forward,
    iterate_batches,
    masked_ce_loss,
    sample_nonempty_mask,
    train_step,
)
from .numcore import AdamHyper, ContractError, NumericError, Parameter

log = logging.getLogger(__name__)

KINDS = ("weights", "heads", "ffn_dims")


class ScheduleExhausted(ContractError):
    pass


# ---------------------------------------------------------------------------
# density
# ---------------------------------------------------------------------------


def unit_counts(weights: EncoderWeights, kind: str) -> tuple[int, int]:
    """(remaining, total) prunable units of the given kind."""
    cfg = weights.config
    if kind == "weights":
        remaining = total = 0
        for n in weights.prunable_names():
            p = weights[n]
            total += p.data.size
            remaining += p.data.size if p.mask is None else int(p.mask.sum())
        return remaining, total
    if kind == "heads":
        return sum(weights.head_counts()), cfg.n_layers * cfg.n_heads
    if kind == "ffn_dims":
        return sum(weights.ffn_counts()), cfg.n_layers * cfg.ffn_dim
    raise ContractError(f"unknown density kind {kind!r}")


def density_of(weights: EncoderWeights, kind: str) -> float:
    """Remaining over total prunable units; 1.0 means unpruned.

    Weight density is taken over the structurally present block linear
    entries, so it is measured relative to the current shapes.
    """
    remaining, total = unit_counts(weights, kind)
    return remaining / total if total else 1.0


def densities(weights: EncoderWeights) -> dict[str, float]:
    return {k: density_of(weights, k) for k in KINDS}


# ---------------------------------------------------------------------------
# weight pruning schedule and trigger
# ---------------------------------------------------------------------------

DEFAULT_SCHEDULE = ((20, 80), (10, 50), (5, 35), (2.5, 30), (1, 10), (0.5, 5))


@dataclass
class WeightPruneSchedule:
    """(step, floor) pairs in percentage points of the prunable total."""

    stages: tuple = DEFAULT_SCHEDULE

    def __post_init__(self):
        self.stages = tuple((float(s), float(f)) for s, f in self.stages)
        floors = [f for _, f in self.stages]
        if any(s <= 0 for s, _ in self.stages):
            raise ContractError("schedule steps must be positive")
        if any(a <= b for a, b in zip(floors, floors[1:])):
            raise ContractError("schedule floors must strictly decrease")

    @property
    def stop(self) -> Fraction:
        return Fraction(str(self.stages[-1][1]))

    def next_target(self, current_pct) -> Fraction:
        cur = Fraction(str(current_pct)) if not isinstance(current_pct, Fraction) else current_pct
        for step, floor in self.stages:
            floor_f = Fraction(str(floor))
            if cur > floor_f:
                return max(cur - Fraction(str(step)), floor_f)
        raise ScheduleExhausted(f"density {float(cur)}% already at the stop density {float(self.stop)}%")

    def trace(self, until=None) -> list[Fraction]:
        """Target densities in percent, starting from 100."""
        until = self.stop if until is None else Fraction(str(until))
        out = [Fraction(100)]
        while out[-1] > until:
            out.append(self.next_target(out[-1]))
        return out


@dataclass
class TriggerState:
    decay: float = 0.9998
    window: int = 15000
    tolerance: float = 0.001
    ema: float | None = None
    history: deque = field(default_factory=deque)
    fired: int = 0

    def reset(self) -> None:
        self.history.clear()


def trigger_update(state: TriggerState, loss: float) -> tuple[TriggerState, bool]:
    """Feed one loss; fires once the EMA moved by at most ``tolerance`` over ``window`` updates.

    The EMA starts at the first loss seen. ``history`` holds the EMA values of
    the last ``window`` updates (the oldest being the value ``window`` updates
    ago); after firing it is cleared, so the next fire needs a fresh window.
    """
    if state.ema is None:
        state.ema = float(loss)
    prev = state.ema
    state.history.append(prev)
    state.ema = state.decay * prev + (1.0 - state.decay) * float(loss)
    fire = False
    if len(state.history) >= state.window:
        while len(state.history) > state.window:
            state.history.popleft()
        fire = abs(state.ema - state.history[0]) <= state.tolerance
    if fire:
        state.fired += 1
        state.reset()
    return state, fire


def weight_prune_step(weights: EncoderWeights, schedule: WeightPruneSchedule, current_pct) -> tuple[Fraction, int]:
    """Mask the globally smallest-magnitude surviving block weights.

    Survivors are ranked by |w| across every block linear weight and bias;
    ties go to the lower (layer, flat index) first. Exactly
    ``round(target * total)`` entries survive. Returns the new target density
    in percent and the number of entries pruned.
    """
    target = schedule.next_target(current_pct)
    names = weights.prunable_names()
    params = [weights[n] for n in names]
    for p in params:
        if p.mask is None:
            p.set_mask(np.ones_like(p.data))
    mags = np.concatenate([np.abs(p.data).ravel() for p in params])
    alive = np.concatenate([p.mask.ravel() for p in params]) > 0
    total = mags.size
    keep = round(target / 100 * total)
    n_prune = int(alive.sum()) - keep
    if n_prune <= 0:
        return target, 0
    alive_idx = np.flatnonzero(alive)
    order = np.argsort(mags[alive_idx], kind="stable")
    flat_mask = alive.astype(np.float64)
    flat_mask[alive_idx[order[:n_prune]]] = 0.0
    off = 0
    for p in params:
        n = p.data.size
        p.set_mask(flat_mask[off : off + n].reshape(p.shape))
        off += n
    return target, n_prune


# ---------------------------------------------------------------------------
# head pruning
# ---------------------------------------------------------------------------


@dataclass
class HeadScore:
    layer: int
    head: int
    score: float
    raw: float | None = None


def _head_rows(i: int, dh: int) -> slice:
    return slice(i * dh, (i + 1) * dh)


def head_scores_weight(weights: EncoderWeights) -> list[HeadScore]:
    """L1 norm of each head's Q/K/V rows (with biases) and its W_O columns."""
    dh = weights.config.head_dim
    out = []
    for layer in range(weights.config.n_layers):
        pre = f"layers.{layer}."
        for h in range(weights.layer_heads(layer)):
            rows = _head_rows(h, dh)
            s = 0.0
            for name in ("q", "k", "v"):
                s += np.abs(weights[pre + name + ".weight"].data[rows]).sum()
                s += np.abs(weights[pre + name + ".bias"].data[rows]).sum()
            s += np.abs(weights[pre + "o.weight"].data[:, rows]).sum()
            out.append(HeadScore(layer, h, float(s)))
    return out


def head_scores_gradient(
    weights: EncoderWeights, data: Sequence[Utterance], seed: int = 0
) -> list[HeadScore]:
    """Gradient-based head importance, normalised to unit L2 norm within each layer.

    For head k and example x, with V the head's attention-weighted values
    (T x d_h) and G the loss gradient with respect to V, the example adds the
    entrywise L1 norm of V^T G. Examples are scored one at a time in inference
    mode under a seeded span mask. ``raw`` keeps the unnormalised sum.
    """
    if not data:
        raise ContractError("gradient head scores need at least one utterance")
    rng = np.random.default_rng(seed)
    L = weights.config.n_layers
    raw = [np.zeros(weights.layer_heads(i)) for i in range(L)]
    for u in data:
        fm = sample_nonempty_mask(u.num_frames, weights.config.masking, rng)[None]
        weights.zero_grad()
        res = forward(weights, u.features[None], fm, training=False)
        loss = masked_ce_loss(res.logits, u.cluster_labels[None], fm)
        nc.backward(loss)
        for i, ctx in enumerate(res.head_outputs):
            V = ctx.data[0]
            G = ctx.grad[0] if ctx.grad is not None else np.zeros_like(V)
            raw[i] += np.abs(np.einsum("htd,hte->hde", V, G)).sum(axis=(1, 2))
    weights.zero_grad()
    out = []
    for i in range(L):
        norm = np.sqrt((raw[i] ** 2).sum())
        normed = raw[i] / norm if norm > 0 else raw[i]
        out.extend(HeadScore(i, h, float(normed[h]), float(raw[i][h])) for h in range(len(raw[i])))
    return out


def _slice_param(p: Parameter, idx: np.ndarray, axis: int) -> Parameter:
    q = Parameter(np.take(p.data, idx, axis=axis), None if p.mask is None else np.take(p.mask, idx, axis=axis))
    q.m = np.take(p.m, idx, axis=axis)
    q.v = np.take(p.v, idx, axis=axis)
    q.step = p.step
    return q


def remove_heads(weights: EncoderWeights, removed: dict[int, Sequence[int]]) -> EncoderWeights:
    """Copy of ``weights`` with the listed heads (layer -> head ids) physically removed."""
    out = weights.copy()
    dh = weights.config.head_dim
    for layer, heads in removed.items():
        heads = set(int(h) for h in heads)
        if not heads:
            continue
        H = weights.layer_heads(layer)
        if len(heads) >= H:
            raise ContractError(f"refusing to remove every head of layer {layer}")
        keep = np.concatenate([np.arange(h * dh, (h + 1) * dh) for h in range(H) if h not in heads])
        pre = f"layers.{layer}."
        for name in ("q", "k", "v"):
            out.params[pre + name + ".weight"] = _slice_param(out[pre + name + ".weight"], keep, 0)
            out.params[pre + name + ".bias"] = _slice_param(out[pre + name + ".bias"], keep, 0)
        out.params[pre + "o.weight"] = _slice_param(out[pre + "o.weight"], keep, 1)
    return out


def select_heads(weights: EncoderWeights, scores: Sequence[HeadScore], mode: str, count: int) -> dict[int, list[int]]:
    """Pick heads to remove.

    ``per_layer``: the ``count`` lowest-scoring heads of every layer.
    ``global``: the ``count`` lowest scores across layers, skipping any head
    whose removal would leave its layer empty.
    """
    L = weights.config.n_layers
    live = weights.head_counts()
    chosen: dict[int, list[int]] = {i: [] for i in range(L)}
    ranked = sorted(scores, key=lambda s: (s.score, s.layer, s.head))
    if mode == "per_layer":
        if any(count >= h for h in live):
            raise ContractError(f"removing {count} heads per layer would empty a layer")
        for s in ranked:
            if len(chosen[s.layer]) < count:
                chosen[s.layer].append(s.head)
    elif mode == "global":
        if count > sum(live) - L:
            raise ContractError(f"cannot remove {count} heads without emptying a layer")
        taken = 0
        for s in ranked:
            if taken == count:
                break
            if live[s.layer] - len(chosen[s.layer]) > 1:
                chosen[s.layer].append(s.head)
                taken += 1
    else:
        raise ContractError(f"unknown head pruning mode {mode!r}")
    return {i: sorted(h) for i, h in chosen.items() if h}


def prune_heads(weights: EncoderWeights, scores: Sequence[HeadScore], mode: str = "global", count: int = 0) -> EncoderWeights:
    return remove_heads(weights, select_heads(weights, scores, mode, count))


def head_masks_for(weights: EncoderWeights, removed: dict[int, Sequence[int]]) -> list[np.ndarray]:
    """0/1 vectors that zero the given heads' outputs without removing them."""
    masks = []
    for i in range(weights.config.n_layers):
        m = np.ones(weights.layer_heads(i))
        m[list(removed.get(i, []))] = 0.0
        masks.append(m)
    return masks


# ---------------------------------------------------------------------------
# FFN (low-rank) pruning
# ---------------------------------------------------------------------------


def ffn_unit_scores(weights: EncoderWeights) -> list[np.ndarray]:
    out = []
    for i in range(weights.config.n_layers):
        pre = f"layers.{i}."
        s = np.abs(weights[pre + "fc1.weight"].data).sum(axis=1)
        s = s + np.abs(weights[pre + "fc1.bias"].data)
        s = s + np.abs(weights[pre + "fc2.weight"].data).sum(axis=0)
        out.append(s)
    return out


def select_ffn(weights: EncoderWeights, n_dims: int) -> dict[int, list[int]]:
    chosen = {}
    for i, s in enumerate(ffn_unit_scores(weights)):
        if n_dims >= len(s):
            raise ContractError(f"cannot remove {n_dims} of {len(s)} FFN units in layer {i}")
        if n_dims > 0:
            chosen[i] = sorted(np.argsort(s, kind="stable")[:n_dims].tolist())
    return chosen


def remove_ffn_units(weights: EncoderWeights, removed: dict[int, Sequence[int]]) -> EncoderWeights:
    out = weights.copy()
    for layer, units in removed.items():
        f = weights.layer_ffn(layer)
        drop = set(int(u) for u in units)
        if len(drop) >= f:
            raise ContractError(f"refusing to remove every FFN unit of layer {layer}")
        keep = np.array([j for j in range(f) if j not in drop])
        pre = f"layers.{layer}."
        out.params[pre + "fc1.weight"] = _slice_param(out[pre + "fc1.weight"], keep, 0)
        out.params[pre + "fc1.bias"] = _slice_param(out[pre + "fc1.bias"], keep, 0)
        out.params[pre + "fc2.weight"] = _slice_param(out[pre + "fc2.weight"], keep, 1)
    return out


def prune_ffn(weights: EncoderWeights, n_dims: int) -> EncoderWeights:
    """Remove the ``n_dims`` lowest-scoring hidden units of every layer's FFN."""
    return remove_ffn_units(weights, select_ffn(weights, n_dims))


def ffn_masks_for(weights: EncoderWeights, removed: dict[int, Sequence[int]]) -> list[np.ndarray]:
    masks = []
    for i in range(weights.config.n_layers):
        m = np.ones(weights.layer_ffn(i))
        m[list(removed.get(i, []))] = 0.0
        masks.append(m)
    return masks


# ---------------------------------------------------------------------------
# iterative driver
# ---------------------------------------------------------------------------


@dataclass
class CompressConfig:
    technique: str = "weights"  # weights | heads | ffn
    learning_rate: float = 1e-5
    batch_size: int = 4
    schedule: WeightPruneSchedule = field(default_factory=WeightPruneSchedule)
    trigger_decay: float = 0.9998
    trigger_window: int = 15000
    trigger_tolerance: float = 0.001
    max_retrain_steps: int = 0  # 0 = no cap on trigger-driven retraining
    retrain_steps: int = 2000
    head_criterion: str = "gradient"  # gradient | weight
    heads_per_stage: int = 4
    heads_per_layer: int = 1
    score_fraction: float = 0.25
    ffn_dims_per_stage: int = 0  # 0 = ffn_dim // 24
    stop_density: float = 0.05
    one_shot: bool = False
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.schedule, dict):
            self.schedule = WeightPruneSchedule(**self.schedule)
        elif not isinstance(self.schedule, WeightPruneSchedule):
            self.schedule = WeightPruneSchedule(tuple(self.schedule))
        if self.technique not in ("weights", "heads", "ffn"):
            raise ContractError(f"unknown technique {self.technique!r}")
        if self.head_criterion not in ("gradient", "weight"):
            raise ContractError(f"unknown head criterion {self.head_criterion!r}")
        if not 0.0 < self.score_fraction <= 1.0:
            raise ContractError("score_fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schedule"] = {"stages": [list(s) for s in self.schedule.stages]}
        return d


@dataclass
class StageResult:
    stage: int
    target_pct: float | None
    density: dict[str, float]
    dev_loss: float
    train_steps: int
    last_train_loss: float | None
    weights: EncoderWeights
    pruned: dict = field(default_factory=dict)


def _retrain(weights, corpus, hyper, rng, steps, trigger: TriggerState | None, max_steps: int):
    """Train for ``steps`` steps, or until ``trigger`` fires when one is given."""
    batches = iterate_batches(len(corpus), hyper.batch_size, rng)
    n = 0
    last = None
    while True:
        if trigger is None and n >= steps:
            break
        if trigger is not None and max_steps and n >= max_steps:
            break
        _, idx = next(batches)
        last = train_step(weights, [corpus[i] for i in idx], hyper, rng)
        n += 1
        if trigger is not None:
            _, fire = trigger_update(trigger, last)
            if fire:
                break
    return n, last


def iterative_compress(
    weights: EncoderWeights,
    cfg: CompressConfig,
    corpus: Sequence[Utterance],
    dev: Sequence[Utterance],
    on_stage: Callable[[StageResult], None] | None = None,
) -> list[StageResult]:
    """Alternate prune steps with retraining until ``cfg.stop_density`` is reached.

    Stage 0 is the untouched input. Weight pruning retrains until the EMA
    trigger fires (optionally capped by ``max_retrain_steps``); head and FFN
    pruning retrain for a fixed ``retrain_steps``. The input weights are not
    modified.
    """
    if cfg.one_shot:
        raise ContractError("one-shot pruning is not supported; use the iterative loop")
    w = weights.copy()
    w.reset_optimizer()
    rng = np.random.default_rng(cfg.seed)
    hyper = AdamHyper(learning_rate=cfg.learning_rate, batch_size=cfg.batch_size)
    kind = {"weights": "weights", "heads": "heads", "ffn": "ffn_dims"}[cfg.technique]
    stop = Fraction(str(cfg.stop_density))
    results = []

    def emit(stage, target, steps, last, pruned):
        res = StageResult(stage, target, densities(w), eval_loss(w, dev), steps, last, w.copy(), pruned)
        results.append(res)
        if on_stage is not None:
            on_stage(res)

    emit(0, 100.0 if kind == "weights" else None, 0, None, {})
    pct = Fraction(100)
    trigger = TriggerState(cfg.trigger_decay, cfg.trigger_window, cfg.trigger_tolerance)
    stage = 0
    while True:
        stage += 1
        pruned: dict = {}
        last_good = w.copy()
        if kind == "weights":
            if pct <= max(stop * 100, cfg.schedule.stop):
                break
            pct, n = weight_prune_step(w, cfg.schedule, pct)
            pruned = {"entries": n}
            target = float(pct)
        elif kind == "heads":
            remaining, total = unit_counts(w, "heads")
            if Fraction(remaining, total) <= stop:
                break
            if cfg.head_criterion == "gradient":
                k = max(1, int(round(cfg.score_fraction * len(corpus))))
                subset = [corpus[i] for i in np.sort(rng.permutation(len(corpus))[:k])]
                scores = head_scores_gradient(w, subset, seed=int(rng.integers(2**31)))
                mode, count = "global", min(cfg.heads_per_stage, remaining - int(np.ceil(stop * total)))
            else:
                scores = head_scores_weight(w)
                mode, count = "per_layer", cfg.heads_per_layer
            try:
                removed = select_heads(w, scores, mode, count)
            except ContractError:
                break
            if not removed:
                break
            w = remove_heads(w, removed)
            pruned = {str(i): h for i, h in removed.items()}
            target = None
        else:
            remaining, total = unit_counts(w, "ffn_dims")
            if Fraction(remaining, total) <= stop:
                break
            step_dims = cfg.ffn_dims_per_stage or max(1, w.config.ffn_dim // 24)
            if step_dims >= min(w.ffn_counts()):
                break
            removed = select_ffn(w, step_dims)
            w = remove_ffn_units(w, removed)
            pruned = {str(i): u for i, u in removed.items()}
            target = None
        try:
            if kind == "weights":
                trigger.reset()
                steps, last = _retrain(w, corpus, hyper, rng, 0, trigger, cfg.max_retrain_steps)
            else:
                steps, last = _retrain(w, corpus, hyper, rng, cfg.retrain_steps, None, 0)
        except NumericError as exc:
            raise DivergenceError(str(exc), last_good, stage) from exc
        log.info("stage %d: %s density %.4f after %d steps", stage, kind, density_of(w, kind), steps)
        emit(stage, target, steps, last, pruned)
    return results
