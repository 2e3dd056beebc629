"""Masked-prediction Transformer encoder over frame features."""

from __future__ import annotations

import copy
import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .corpus import Utterance
from .numcore import AdamHyper, ContractError, NumericError, Parameter, Tensor


class EmptyMaskError(ContractError):
    pass


class DivergenceError(NumericError):
    """Training produced a non-finite value; ``last_good`` holds the previous snapshot."""

    def __init__(self, message, last_good=None, step=None):
        super().__init__(message)
        self.last_good = last_good
        self.step = step


@dataclass
class MaskingSpec:
    mask_prob: float = 0.07
    span_len: int = 10

    def __post_init__(self):
        if not 0.0 < self.mask_prob < 1.0:
            raise ContractError("mask_prob must lie in (0, 1)")
        if self.span_len < 1:
            raise ContractError("span_len must be >= 1")

    @classmethod
    def for_period(cls, frame_period_ms: int) -> "MaskingSpec":
        return cls(0.14, 5) if frame_period_ms == 20 else cls(0.07, 10)

    def expected_coverage(self) -> float:
        return 1.0 - (1.0 - self.mask_prob) ** self.span_len


@dataclass
class EncoderConfig:
    n_layers: int = 12
    d_model: int = 96
    n_heads: int = 4
    ffn_dim: int = 384
    input_dim: int = 16
    n_clusters: int = 32
    dropout: float = 0.1
    masking: MaskingSpec = field(default_factory=MaskingSpec)
    frame_period_ms: int = 10
    # choices the model description leaves open; echoed into every emitted config
    norm_placement: str = "pre-ln"
    activation: str = "gelu-tanh"
    positional: str = "sinusoidal"
    mask_replacement: str = "learned-embedding"

    def __post_init__(self):
        if isinstance(self.masking, dict):
            self.masking = MaskingSpec(**self.masking)
        if self.n_layers < 0 or self.d_model < 1 or self.n_heads < 1:
            raise ContractError("n_layers >= 0, d_model >= 1 and n_heads >= 1 required")
        if self.d_model % self.n_heads:
            raise ContractError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.ffn_dim < 1:
            raise ContractError("ffn_dim must be >= 1")
        if self.n_clusters < 2:
            raise ContractError("n_clusters must be >= 2")
        if self.frame_period_ms not in (10, 20):
            raise ContractError("frame_period_ms must be 10 or 20")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractError("dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


LAYER_LINEARS = ("q", "k", "v", "o", "fc1", "fc2")


class EncoderWeights:
    """Named parameters plus the config they were built for.

    Structural pruning changes tensor shapes in place; live head and FFN
    counts are read off the shapes.
    """

    def __init__(self, config: EncoderConfig, params: dict[str, Parameter], meta: dict | None = None):
        self.config = config
        self.params = params
        self.meta = dict(meta or {})

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def layer_heads(self, i: int) -> int:
        return self.params[f"layers.{i}.q.weight"].shape[0] // self.config.head_dim

    def layer_ffn(self, i: int) -> int:
        return self.params[f"layers.{i}.fc1.weight"].shape[0]

    def head_counts(self) -> list[int]:
        return [self.layer_heads(i) for i in range(self.config.n_layers)]

    def ffn_counts(self) -> list[int]:
        return [self.layer_ffn(i) for i in range(self.config.n_layers)]

    def block_names(self, i: int | None = None) -> list[str]:
        pref = "layers." if i is None else f"layers.{i}."
        return [n for n in self.params if n.startswith(pref)]

    def prunable_names(self) -> list[str]:
        """Weights and biases of the linear layers inside the Transformer blocks."""
        return [
            n for n in self.params
            if n.startswith("layers.") and n.split(".")[2] in LAYER_LINEARS
        ]

    def copy(self) -> "EncoderWeights":
        params = {}
        for n, p in self.params.items():
            q = Parameter(p.data, p.mask)
            q.m, q.v, q.step = p.m.copy(), p.v.copy(), p.step
            params[n] = q
        return EncoderWeights(copy.deepcopy(self.config), params, self.meta)

    def reset_optimizer(self) -> None:
        for p in self.params.values():
            p.m = np.zeros_like(p.data)
            p.v = np.zeros_like(p.data)
            p.step = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def digest(self) -> str:
        h = hashlib.sha256()
        for n, p in self.params.items():
            h.update(n.encode())
            h.update(p.data.tobytes())
            if p.mask is not None:
                h.update(p.mask.tobytes())
        return h.hexdigest()


def init_weights(config: EncoderConfig, seed: int = 0) -> EncoderWeights:
    rng = np.random.default_rng(seed)
    d, f, L = config.d_model, config.ffn_dim, config.n_layers
    resid_scale = 1.0 / math.sqrt(2.0 * max(L, 1))

    def dense(n_out, n_in, scale=1.0):
        return rng.standard_normal((n_out, n_in)) * (scale / math.sqrt(n_in))

    p: dict[str, np.ndarray] = {
        "in_proj.weight": dense(d, config.input_dim),
        "in_proj.bias": np.zeros(d),
        "mask_emb": rng.standard_normal(d),
    }
    for i in range(L):
        pre = f"layers.{i}."
        p[pre + "ln1.weight"] = np.ones(d)
        p[pre + "ln1.bias"] = np.zeros(d)
        for name in ("q", "k", "v"):
            p[pre + name + ".weight"] = dense(d, d)
            p[pre + name + ".bias"] = np.zeros(d)
        p[pre + "o.weight"] = dense(d, d, resid_scale)
        p[pre + "o.bias"] = np.zeros(d)
        p[pre + "ln2.weight"] = np.ones(d)
        p[pre + "ln2.bias"] = np.zeros(d)
        p[pre + "fc1.weight"] = dense(f, d)
        p[pre + "fc1.bias"] = np.zeros(f)
        p[pre + "fc2.weight"] = dense(d, f, resid_scale)
        p[pre + "fc2.bias"] = np.zeros(d)
    # small head so the untrained loss starts near ln K
    p["classifier.weight"] = dense(config.n_clusters, d, 0.1)
    p["classifier.bias"] = np.zeros(config.n_clusters)
    return EncoderWeights(config, {n: Parameter(v) for n, v in p.items()})


def sinusoidal_positions(T: int, d: int) -> np.ndarray:
    pos = np.arange(T)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe


def sample_mask(T: int, spec: MaskingSpec, rng: np.random.Generator) -> np.ndarray:
    """Union of spans of ``span_len`` frames, each frame starting one with prob ``mask_prob``."""
    starts = np.flatnonzero(rng.random(T) < spec.mask_prob)
    mask = np.zeros(T, dtype=bool)
    for off in range(spec.span_len):
        idx = starts + off
        mask[idx[idx < T]] = True
    return mask


def sample_nonempty_mask(T: int, spec: MaskingSpec, rng: np.random.Generator, max_tries: int = 1000) -> np.ndarray:
    for _ in range(max_tries):
        m = sample_mask(T, spec, rng)
        if m.any():
            return m
    raise EmptyMaskError(f"could not sample a non-empty mask for T={T}")


@dataclass
class ForwardResult:
    taps: list[Tensor]
    logits: Tensor | None
    head_outputs: list[Tensor]


def forward(
    weights: EncoderWeights,
    x: np.ndarray,
    frame_mask: np.ndarray | None = None,
    lengths: Sequence[int] | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
    n_layers: int | None = None,
    head_masks: Sequence[np.ndarray | None] | None = None,
    ffn_masks: Sequence[np.ndarray | None] | None = None,
    with_logits: bool = True,
) -> ForwardResult:
    """Batched forward pass over ``x`` of shape (B, T, D_in).

    ``head_outputs[i]`` is layer i's attention-weighted values, shape
    (B, H_i, T, d_h), kept so callers can read its gradient after backward.
    ``head_masks``/``ffn_masks`` zero individual heads or FFN units without
    removing them.
    """
    cfg = weights.config
    P = weights.params
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[-1] != cfg.input_dim:
        raise ContractError(f"expected input (B, T, {cfg.input_dim}), got {x.shape}")
    B, T, _ = x.shape
    depth = cfg.n_layers if n_layers is None else n_layers
    if not 0 <= depth <= cfg.n_layers:
        raise ContractError(f"layer count {depth} outside [0, {cfg.n_layers}]")
    p_drop = cfg.dropout if training else 0.0
    dh = cfg.head_dim
    d = cfg.d_model

    h = nc.linear(x, P["in_proj.weight"], P["in_proj.bias"], tag="input_projection")
    if frame_mask is not None and np.any(frame_mask):
        m = np.asarray(frame_mask, dtype=np.float64)[..., None]
        h = nc.add(nc.mul(h, 1.0 - m), nc.mul(m, P["mask_emb"]))
    h = nc.add(h, sinusoidal_positions(T, d))
    taps = [h]
    heads_out = []

    bias = None
    if lengths is not None:
        valid = np.arange(T)[None, :] < np.asarray(lengths)[:, None]
        bias = np.where(valid, 0.0, -1e30)[:, None, None, :]

    def drop(t):
        return nc.dropout(t, p_drop, rng, training)

    for i in range(depth):
        pre = f"layers.{i}."
        H = weights.layer_heads(i)
        a = nc.layer_norm(h, P[pre + "ln1.weight"], P[pre + "ln1.bias"])

        def split(t):
            return nc.transpose(nc.reshape(t, (B, T, H, dh)), (0, 2, 1, 3))

        q = split(drop(nc.linear(a, P[pre + "q.weight"], P[pre + "q.bias"], tag="attn_proj")))
        k = split(drop(nc.linear(a, P[pre + "k.weight"], P[pre + "k.bias"], tag="attn_proj")))
        v = split(drop(nc.linear(a, P[pre + "v.weight"], P[pre + "v.bias"], tag="attn_proj")))
        scores = nc.mul(nc.matmul(q, nc.transpose(k, (0, 1, 3, 2)), tag="attn_scores"), 1.0 / math.sqrt(dh))
        probs = nc.softmax(scores, bias)
        ctx = nc.matmul(probs, v, tag="attn_values")
        heads_out.append(ctx)
        if head_masks is not None and head_masks[i] is not None:
            ctx = nc.mul(ctx, np.asarray(head_masks[i], dtype=np.float64)[None, :, None, None])
        merged = nc.reshape(nc.transpose(ctx, (0, 2, 1, 3)), (B, T, H * dh))
        h = nc.add(h, drop(nc.linear(merged, P[pre + "o.weight"], P[pre + "o.bias"], tag="attn_proj")))

        z = nc.layer_norm(h, P[pre + "ln2.weight"], P[pre + "ln2.bias"])
        z = drop(nc.gelu(nc.linear(z, P[pre + "fc1.weight"], P[pre + "fc1.bias"], tag="ffn")))
        if ffn_masks is not None and ffn_masks[i] is not None:
            z = nc.mul(z, np.asarray(ffn_masks[i], dtype=np.float64))
        h = nc.add(h, drop(nc.linear(z, P[pre + "fc2.weight"], P[pre + "fc2.bias"], tag="ffn")))
        taps.append(h)

    logits = None
    if with_logits:
        logits = nc.linear(h, P["classifier.weight"], P["classifier.bias"], tag="classifier")
    return ForwardResult(taps, logits, heads_out)


@dataclass
class LayerOutputs:
    """Per-layer hidden matrices h_0..h_k, each T x d."""

    taps: list[np.ndarray]

    def __len__(self):
        return len(self.taps)

    def __getitem__(self, i):
        return self.taps[i]


def encode(
    u: Utterance | np.ndarray,
    weights: EncoderWeights,
    frame_mask: np.ndarray | None = None,
    training: bool = False,
    rng: np.random.Generator | None = None,
    **kw,
) -> tuple[LayerOutputs, np.ndarray]:
    """Single-utterance forward; returns the layer taps and the T x K logits."""
    feats = u.features if isinstance(u, Utterance) else np.asarray(u, dtype=np.float64)
    fm = None if frame_mask is None else np.asarray(frame_mask, dtype=bool)[None]
    with nc.no_grad():
        res = forward(weights, feats[None], fm, training=training, rng=rng, **kw)
    return LayerOutputs([t.data[0] for t in res.taps]), res.logits.data[0]


def encode_prefix(u: Utterance | np.ndarray, weights: EncoderWeights, k: int, **kw) -> LayerOutputs:
    """Taps h_0..h_k of the first ``k`` blocks; later blocks are never run."""
    if not 0 <= k <= weights.config.n_layers:
        raise ContractError(f"prefix length {k} outside [0, {weights.config.n_layers}]")
    feats = u.features if isinstance(u, Utterance) else np.asarray(u, dtype=np.float64)
    with nc.no_grad():
        res = forward(weights, feats[None], n_layers=k, with_logits=False, **kw)
    return LayerOutputs([t.data[0] for t in res.taps])


def masked_ce_loss(logits: Tensor, cluster_labels, frame_mask) -> Tensor:
    """Mean cross-entropy over masked frames only."""
    m = np.asarray(frame_mask, dtype=np.float64)
    n = m.sum()
    if n == 0:
        raise EmptyMaskError("masked_ce_loss needs at least one masked frame")
    logits = nc.as_tensor(logits)
    labels = np.where(m > 0, np.asarray(cluster_labels), 0)
    return nc.cross_entropy(logits, labels, m / n)


# ---------------------------------------------------------------------------
# batching and training
# ---------------------------------------------------------------------------


def pad_batch(utts: Sequence[Utterance]):
    """Stack utterances into (B, T_max, D) features, (B, T_max) labels and lengths."""
    lengths = np.array([u.num_frames for u in utts])
    T = int(lengths.max())
    D = utts[0].dim
    x = np.zeros((len(utts), T, D))
    labels = np.zeros((len(utts), T), dtype=np.int64)
    for b, u in enumerate(utts):
        x[b, : u.num_frames] = u.features
        if u.cluster_labels is not None:
            labels[b, : u.num_frames] = u.cluster_labels
    return x, labels, lengths


def batch_masks(lengths, spec: MaskingSpec, rng: np.random.Generator) -> np.ndarray:
    T = int(max(lengths))
    out = np.zeros((len(lengths), T), dtype=bool)
    for b, n in enumerate(lengths):
        out[b, :n] = sample_nonempty_mask(int(n), spec, rng)
    return out


def batch_loss(weights: EncoderWeights, utts: Sequence[Utterance], rng: np.random.Generator, training: bool, **kw):
    for u in utts:
        if u.cluster_labels is None:
            raise ContractError("pre-training needs cluster labels on every utterance")
    x, labels, lengths = pad_batch(utts)
    fm = batch_masks(lengths, weights.config.masking, rng)
    res = forward(weights, x, fm, lengths=lengths if len(set(lengths)) > 1 else None, training=training, rng=rng, **kw)
    return masked_ce_loss(res.logits, labels, fm), res


def train_step(weights: EncoderWeights, utts: Sequence[Utterance], hyper: AdamHyper, rng: np.random.Generator) -> float:
    weights.zero_grad()
    loss, _ = batch_loss(weights, utts, rng, training=True)
    nc.backward(loss)
    nc.adam_step([p for p in weights.parameters() if p.grad is not None], hyper)
    return float(loss.data)


def eval_loss(weights: EncoderWeights, utts: Sequence[Utterance], seed: int = 1234, batch_size: int = 16) -> float:
    """Masked-prediction loss in inference mode with seeded masks, frame-weighted over the set."""
    rng = np.random.default_rng(seed)
    total, count = 0.0, 0
    with nc.no_grad():
        for s in range(0, len(utts), batch_size):
            chunk = utts[s : s + batch_size]
            x, labels, lengths = pad_batch(chunk)
            fm = batch_masks(lengths, weights.config.masking, rng)
            res = forward(weights, x, fm, lengths=lengths, training=False)
            n = int(fm.sum())
            total += float(masked_ce_loss(res.logits, labels, fm).data) * n
            count += n
    return total / count


def iterate_batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches, reshuffled every epoch; yields (epoch, idx)."""
    epoch = 0
    while True:
        order = rng.permutation(n)
        for s in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield epoch, order[s : s + batch_size]
        epoch += 1


@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    dev: list[tuple[int, float]] = field(default_factory=list)


def pretrain(
    corpus: Sequence[Utterance],
    config: EncoderConfig,
    hyper: AdamHyper,
    epochs: float,
    seed: int = 0,
    weights: EncoderWeights | None = None,
    dev: Sequence[Utterance] | None = None,
    eval_every: int = 0,
    snapshot_every: int = 50,
    on_step: Callable[[int, float], None] | None = None,
) -> tuple[EncoderWeights, TrainLog]:
    """Adam training of the masked cluster-prediction loss.

    ``epochs`` may be fractional. On a non-finite value a
    :class:`DivergenceError` carrying the last snapshot is raised.
    """
    if not corpus:
        raise ContractError("empty corpus")
    rng = np.random.default_rng(seed)
    if weights is None:
        weights = init_weights(config, seed=int(rng.integers(2**31)))
    total_steps = max(1, int(round(epochs * len(corpus) / hyper.batch_size)))
    log = TrainLog()
    last_good = weights.copy()
    batches = iterate_batches(len(corpus), hyper.batch_size, rng)
    for step in range(1, total_steps + 1):
        _, idx = next(batches)
        try:
            loss = train_step(weights, [corpus[i] for i in idx], hyper, rng)
        except NumericError as exc:
            raise DivergenceError(str(exc), last_good, step) from exc
        log.steps.append(step)
        log.losses.append(loss)
        if snapshot_every and step % snapshot_every == 0:
            last_good = weights.copy()
        if on_step is not None:
            on_step(step, loss)
        if dev and eval_every and (step % eval_every == 0 or step == total_steps):
            log.dev.append((step, eval_loss(weights, dev)))
    return weights, log


# ---------------------------------------------------------------------------
# checkpoint files
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"MHCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class CorruptCheckpointError(CheckpointError):
    pass


class UnsupportedVersionError(CheckpointError):
    pass


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype="<f8").tobytes()


def dump_checkpoint(weights: EncoderWeights) -> bytes:
    header = json.dumps({"config": weights.config.to_dict(), "meta": weights.meta}, sort_keys=True).encode("utf-8")
    tensors = [(n, p.data) for n, p in weights.params.items()]
    tensors += [(n + ".mask", p.mask) for n, p in weights.params.items() if p.mask is not None]
    body = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(header)), header, struct.pack("<I", len(tensors))]
    body += [_pack_tensor(n, a) for n, a in tensors]
    blob = b"".join(body)
    return blob + hashlib.sha256(blob).digest()


def parse_checkpoint(buf: bytes) -> EncoderWeights:
    if len(buf) < 12 + 32 or buf[:4] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or too short)")
    version = struct.unpack_from("<I", buf, 4)[0]
    if version != CKPT_VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    blob, digest = buf[:-32], buf[-32:]
    if hashlib.sha256(blob).digest() != digest:
        raise CorruptCheckpointError("checkpoint checksum mismatch")
    (hlen,) = struct.unpack_from("<I", blob, 8)
    off = 12
    header = json.loads(blob[off : off + hlen].decode("utf-8"))
    off += hlen
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{ndim}I", blob, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(blob):
        raise CorruptCheckpointError("trailing bytes in checkpoint body")
    params = {}
    for name, arr in arrays.items():
        if name.endswith(".mask"):
            continue
        params[name] = Parameter(arr, arrays.get(name + ".mask"))
    return EncoderWeights(EncoderConfig.from_dict(header["config"]), params, header.get("meta"))


def save_checkpoint(path, weights: EncoderWeights) -> str:
    """Write ``weights`` to ``path``; returns the sha256 of the file."""
    blob = dump_checkpoint(weights)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> EncoderWeights:
    return parse_checkpoint(Path(path).read_bytes())
