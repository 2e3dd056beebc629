"""Frozen-upstream probes on a learned softmax-weighted sum of layer outputs."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import numcore as nc
from .corpus import Utterance
from .encoder import EncoderWeights, encode_prefix
from .numcore import AdamHyper, ContractError, Parameter, Tensor

TASKS = ("frame_state", "seq_class")


class MissingLabelsError(ContractError):
    pass


@dataclass
class ProbeConfig:
    epochs: int = 20
    learning_rate: float = 1e-3
    batch_size: int = 8
    normalize_taps: bool = True
    split: tuple = (0.8, 0.1, 0.1)
    seed: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ProbeResult:
    task: str
    accuracy: float
    dev_accuracy: float
    layer_weights: list[float]
    upstream_hash: str
    n_layers: int
    n_classes: int
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def softmax_weights(raw) -> np.ndarray:
    r = np.asarray(raw.data if isinstance(raw, Tensor) else raw, dtype=np.float64)
    e = np.exp(r - r.max())
    return e / e.sum()


def weighted_features(taps, raw: Tensor) -> Tensor:
    """sum_l softmax(raw)_l * h_l, differentiable in ``raw``.

    ``taps`` is a sequence of equally shaped arrays (or an array with the
    layer axis first).
    """
    S = np.asarray([t.data if isinstance(t, Tensor) else t for t in taps], dtype=np.float64)
    raw = nc.as_tensor(raw)
    if raw.shape != (S.shape[0],):
        raise ContractError(f"{raw.shape[0] if raw.data.ndim else 0} layer weights for {S.shape[0]} taps")
    w = nc.softmax(nc.reshape(raw, (1, S.shape[0])))
    flat = nc.matmul(w, S.reshape(S.shape[0], -1), tag="probe")
    return nc.reshape(flat, S.shape[1:])


def split_indices(n: int, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_dev = int(round(fractions[1] * n))
    return np.sort(order[:n_train]), np.sort(order[n_train : n_train + n_dev]), np.sort(order[n_train + n_dev :])


def _layer_norm(a: np.ndarray) -> np.ndarray:
    mu = a.mean(axis=-1, keepdims=True)
    var = a.var(axis=-1, keepdims=True)
    return (a - mu) / np.sqrt(var + 1e-5)


def extract_taps(weights: EncoderWeights, utts: Sequence[Utterance], n_layers: int | None = None, normalize=True):
    """(L'+1, T, d) stacked taps per utterance, computed in inference mode."""
    k = weights.config.n_layers if n_layers is None else n_layers
    out = []
    for u in utts:
        taps = np.stack(encode_prefix(u, weights, k).taps)
        out.append(_layer_norm(taps) if normalize else taps)
    return out


def train_probe(
    upstream: EncoderWeights,
    corpus: Sequence[Utterance],
    task: str,
    cfg: ProbeConfig | None = None,
    n_layers: int | None = None,
) -> ProbeResult:
    """Train a linear probe (mean-pooled for ``seq_class``) plus layer weighting.

    The upstream is never updated; its digest is checked before and after.
    Accuracy is reported on the held-out test split.
    """
    cfg = cfg or ProbeConfig()
    if task not in TASKS:
        raise ContractError(f"unknown probe task {task!r}")
    if not corpus:
        raise ContractError("empty corpus")
    if task == "frame_state" and any(u.frame_states is None for u in corpus):
        raise MissingLabelsError("frame_state probe needs frame_states on every utterance")
    if task == "seq_class" and any(u.seq_class is None for u in corpus):
        raise MissingLabelsError("seq_class probe needs seq_class on every utterance")
    before = upstream.digest()
    taps = extract_taps(upstream, corpus, n_layers, cfg.normalize_taps)
    n_taps, d = taps[0].shape[0], taps[0].shape[-1]
    if task == "frame_state":
        labels = [u.frame_states for u in corpus]
        n_classes = int(max(l.max() for l in labels)) + 1
    else:
        taps = [t.mean(axis=1) for t in taps]  # mean-pool over time; commutes with the weighting
        labels = [np.array([u.seq_class]) for u in corpus]
        n_classes = int(max(l[0] for l in labels)) + 1
    train, dev, test = split_indices(len(corpus), cfg.split, cfg.seed)

    rng = np.random.default_rng(cfg.seed)
    raw = Parameter(np.zeros(n_taps))
    W = Parameter(rng.standard_normal((n_classes, d)) / np.sqrt(d))
    b = Parameter(np.zeros(n_classes))
    params = [raw, W, b]
    hyper = AdamHyper(learning_rate=cfg.learning_rate, batch_size=cfg.batch_size)

    def gather(idx):
        if task == "frame_state":
            return np.concatenate([taps[i] for i in idx], axis=1), np.concatenate([labels[i] for i in idx])
        return np.stack([taps[i] for i in idx], axis=1), np.concatenate([labels[i] for i in idx])

    for _ in range(cfg.epochs):
        order = rng.permutation(train)
        for s in range(0, len(order), cfg.batch_size):
            S, y = gather(order[s : s + cfg.batch_size])
            for p in params:
                p.grad = None
            logits = nc.linear(weighted_features(S, raw), W, b, tag="probe")
            loss = nc.cross_entropy(logits, y, np.full(len(y), 1.0 / len(y)))
            nc.backward(loss)
            nc.adam_step(params, hyper)

    def accuracy(idx):
        if len(idx) == 0:
            return float("nan")
        S, y = gather(idx)
        with nc.no_grad():
            pred = nc.linear(weighted_features(S, raw), W, b).data.argmax(axis=-1)
        return float((pred == y).mean())

    if upstream.digest() != before:
        raise RuntimeError("upstream weights changed during probe training")
    return ProbeResult(
        task=task,
        accuracy=accuracy(test),
        dev_accuracy=accuracy(dev),
        layer_weights=softmax_weights(raw).tolist(),
        upstream_hash=before,
        n_layers=n_taps - 1,
        n_classes=n_classes,
    )
