"""Frame-feature utterances: synthetic generation, splicing, k-means targets, file I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numcore import ContractError

FRAME_PERIOD_MS = 10
FEATURE_MAGIC = b"MHFT"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIIIB")
FLAG_STATES = 0x01
FLAG_SEQ_CLASS = 0x02


class EmptyUtteranceError(ContractError):
    pass


class FeatureParseError(ValueError):
    """Malformed feature file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class Utterance:
    features: np.ndarray
    frame_states: np.ndarray | None = None
    seq_class: int | None = None
    cluster_labels: np.ndarray | None = None
    frame_period_ms: int = FRAME_PERIOD_MS

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise EmptyUtteranceError("an utterance needs a T x D feature matrix with T >= 1")
        if not np.all(np.isfinite(self.features)):
            raise ContractError("utterance features must be finite")
        if self.frame_states is not None:
            self.frame_states = np.asarray(self.frame_states, dtype=np.int64)
        if self.cluster_labels is not None:
            self.cluster_labels = np.asarray(self.cluster_labels, dtype=np.int64)
            if len(self.cluster_labels) != self.num_frames:
                raise ContractError("cluster_labels length must match the frame count")

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def duration_s(self) -> float:
        return self.num_frames * self.frame_period_ms / 1000.0


@dataclass
class GeneratorSpec:
    n_states: int = 12
    n_seq_classes: int = 8
    dim: int = 16
    stickiness: float = 0.9
    noise: float = 1.0
    state_scale: float = 1.0
    class_scale: float = 0.5
    length_range: tuple[int, int] = (60, 120)
    seed: int = 0

    def __post_init__(self):
        self.length_range = tuple(self.length_range)
        if self.n_states < 2:
            raise ContractError("n_states must be >= 2")
        if self.n_seq_classes < 1 or self.dim < 1:
            raise ContractError("n_seq_classes and dim must be positive")
        if not 0.0 <= self.stickiness <= 1.0:
            raise ContractError("stickiness must be a probability")
        if self.noise < 0:
            raise ContractError("noise scale must be non-negative")
        lo, hi = self.length_range
        if not 1 <= lo <= hi:
            raise ContractError("length_range must satisfy 1 <= min <= max")


def generate(spec: GeneratorSpec, n_utts: int) -> list[Utterance]:
    """Sample utterances from a sticky Markov chain over hidden states.

    A frame's emission mean is ``state_mean[s] + class_offset[c]``; isotropic
    Gaussian noise of scale ``spec.noise`` is added on top. Leaving a state
    moves uniformly to one of the other states, so the empirical
    self-transition rate estimates ``spec.stickiness``.
    """
    rng = np.random.default_rng(spec.seed)
    state_means = spec.state_scale * rng.standard_normal((spec.n_states, spec.dim))
    class_offsets = spec.class_scale * rng.standard_normal((spec.n_seq_classes, spec.dim))
    lo, hi = spec.length_range
    utts = []
    for _ in range(n_utts):
        T = int(rng.integers(lo, hi + 1))
        c = int(rng.integers(spec.n_seq_classes))
        states = np.empty(T, dtype=np.int64)
        states[0] = rng.integers(spec.n_states)
        stay = rng.random(T) < spec.stickiness
        jumps = rng.integers(1, spec.n_states, size=T)
        for t in range(1, T):
            states[t] = states[t - 1] if stay[t] else (states[t - 1] + jumps[t]) % spec.n_states
        noise = rng.standard_normal((T, spec.dim))
        feats = state_means[states] + class_offsets[c] + spec.noise * noise
        utts.append(Utterance(feats, states, c))
    return utts


def splice2(u: Utterance) -> Utterance:
    """Concatenate frame pairs (2t, 2t+1); labels follow the even frame."""
    T = u.num_frames
    if T < 2:
        raise EmptyUtteranceError("splicing needs at least two frames")
    n = T // 2
    feats = u.features[: 2 * n].reshape(n, 2 * u.dim)
    states = None if u.frame_states is None else u.frame_states[0 : 2 * n : 2]
    labels = None if u.cluster_labels is None else u.cluster_labels[0 : 2 * n : 2]
    return Utterance(feats, states, u.seq_class, labels, frame_period_ms=2 * u.frame_period_ms)


def unsplice2(u: Utterance) -> np.ndarray:
    n, d2 = u.features.shape
    return u.features.reshape(2 * n, d2 // 2)


# ---------------------------------------------------------------------------
# k-means
# ---------------------------------------------------------------------------


@dataclass
class Codebook:
    centroids: np.ndarray
    mean: np.ndarray = field(default=None)
    std: np.ndarray = field(default=None)
    distortion: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.K < 2:
            raise ContractError("a codebook needs K >= 2")
        if not np.all(np.isfinite(self.centroids)):
            raise ContractError("centroids must be finite")
        D = self.centroids.shape[1]
        self.mean = np.zeros(D) if self.mean is None else np.asarray(self.mean, dtype=np.float64)
        self.std = np.ones(D) if self.std is None else np.asarray(self.std, dtype=np.float64)

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    def save(self, path) -> None:
        np.savez(path, centroids=self.centroids, mean=self.mean, std=self.std, distortion=np.array(self.distortion))

    @classmethod
    def load(cls, path) -> "Codebook":
        with np.load(path) as z:
            return cls(z["centroids"], z["mean"], z["std"], [float(x) for x in z["distortion"]])


def nearest_centroid(frames: np.ndarray, centroids: np.ndarray, chunk: int = 2048) -> tuple[np.ndarray, np.ndarray]:
    """Index and squared distance of the nearest centroid; ties go to the lowest id."""
    frames = np.asarray(frames, dtype=np.float64)
    labels = np.empty(len(frames), dtype=np.int64)
    dists = np.empty(len(frames))
    for s in range(0, len(frames), chunk):
        block = frames[s : s + chunk]
        d2 = ((block[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
        labels[s : s + chunk] = d2.argmin(axis=1)
        dists[s : s + chunk] = d2[np.arange(len(block)), labels[s : s + chunk]]
    return labels, dists


def _kmeanspp(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    centroids = np.empty((K, X.shape[1]))
    centroids[0] = X[rng.integers(len(X))]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for k in range(1, K):
        total = d2.sum()
        if total <= 0:
            idx = int(rng.integers(len(X)))
        else:
            idx = int(np.searchsorted(np.cumsum(d2), rng.random() * total, side="right"))
            idx = min(idx, len(X) - 1)
        centroids[k] = X[idx]
        d2 = np.minimum(d2, ((X - centroids[k]) ** 2).sum(axis=1))
    return centroids


def kmeans_fit(frames: np.ndarray, K: int, iters: int = 20, seed: int = 0, standardize: bool = True) -> Codebook:
    """Lloyd's algorithm with k-means++ seeding.

    Frames are standardised per dimension first (statistics kept in the
    codebook). An emptied cluster is moved onto the point currently farthest
    from its centroid. ``Codebook.distortion`` holds the mean squared
    distance measured after each assignment step.
    """
    X = np.asarray(frames, dtype=np.float64)
    N = len(X)
    if N < K:
        raise ContractError(f"k-means needs at least K={K} frames, got {N}")
    if K < 2:
        raise ContractError("K must be >= 2")
    mean = X.mean(axis=0) if standardize else np.zeros(X.shape[1])
    std = X.std(axis=0) if standardize else np.ones(X.shape[1])
    std = np.where(std > 0, std, 1.0)
    Z = (X - mean) / std
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(Z, K, rng)
    history = []
    for _ in range(iters):
        labels, d2 = nearest_centroid(Z, centroids)
        counts = np.bincount(labels, minlength=K)
        for k in np.flatnonzero(counts == 0):
            for far in np.argsort(-d2, kind="stable"):
                if counts[labels[far]] > 1:
                    break
            counts[labels[far]] -= 1
            counts[k] = 1
            centroids[k] = Z[far]
            labels[far] = k
            d2[far] = 0.0
        history.append(float(d2.mean()))
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, Z)
        centroids = sums / counts[:, None]
    return Codebook(centroids, mean, std, history)


def assign(codebook: Codebook, u: Utterance) -> np.ndarray:
    """Nearest-centroid cluster label for every frame of ``u``."""
    if u.dim != codebook.centroids.shape[1]:
        raise ContractError(f"utterance dim {u.dim} != codebook dim {codebook.centroids.shape[1]}")
    labels, _ = nearest_centroid((u.features - codebook.mean) / codebook.std, codebook.centroids)
    return labels


def label_corpus(codebook: Codebook, utts: list[Utterance]) -> list[Utterance]:
    for u in utts:
        u.cluster_labels = assign(codebook, u)
    return utts


# ---------------------------------------------------------------------------
# feature files
# ---------------------------------------------------------------------------


def dump_features(u: Utterance) -> bytes:
    flags = (FLAG_STATES if u.frame_states is not None else 0) | (FLAG_SEQ_CLASS if u.seq_class is not None else 0)
    T, D = u.features.shape
    parts = [_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, T, D, flags), u.features.astype("<f4").tobytes()]
    if u.frame_states is not None:
        parts.append(u.frame_states.astype("<u4").tobytes())
    if u.seq_class is not None:
        parts.append(struct.pack("<I", u.seq_class))
    return b"".join(parts)


def parse_features(buf: bytes) -> Utterance:
    if len(buf) < _HEADER.size:
        raise FeatureParseError("truncated header", len(buf))
    magic, version, T, D, flags = _HEADER.unpack_from(buf, 0)
    if magic != FEATURE_MAGIC:
        raise FeatureParseError(f"bad magic {magic!r}", 0)
    if version != FEATURE_VERSION:
        if struct.unpack(">I", buf[4:8])[0] == FEATURE_VERSION:
            raise FeatureParseError("big-endian feature file; only little-endian is supported", 4)
        raise FeatureParseError(f"unsupported feature file version {version}", 4)
    if flags & ~(FLAG_STATES | FLAG_SEQ_CLASS):
        raise FeatureParseError(f"unknown flag bits {flags:#x}", 16)
    if T < 1 or D < 1:
        raise FeatureParseError(f"invalid shape T={T} D={D}", 8)
    off = _HEADER.size
    need = T * D * 4
    if len(buf) < off + need:
        raise FeatureParseError("truncated feature block", len(buf))
    feats = np.frombuffer(buf, dtype="<f4", count=T * D, offset=off).reshape(T, D).astype(np.float64)
    off += need
    states = None
    if flags & FLAG_STATES:
        if len(buf) < off + 4 * T:
            raise FeatureParseError("truncated frame-state block", len(buf))
        states = np.frombuffer(buf, dtype="<u4", count=T, offset=off).astype(np.int64)
        off += 4 * T
    seq_class = None
    if flags & FLAG_SEQ_CLASS:
        if len(buf) < off + 4:
            raise FeatureParseError("truncated seq_class field", len(buf))
        seq_class = struct.unpack_from("<I", buf, off)[0]
        off += 4
    if off != len(buf):
        raise FeatureParseError(f"{len(buf) - off} trailing bytes", off)
    return Utterance(feats, states, seq_class)


def save_features(path, u: Utterance) -> None:
    Path(path).write_bytes(dump_features(u))


def load_features(path) -> Utterance:
    return parse_features(Path(path).read_bytes())


def write_corpus(directory, utts: list[Utterance]) -> Path:
    """Write one feature file per utterance plus ``manifest.txt``; returns the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    names = []
    for i, u in enumerate(utts):
        name = f"utt{i:05d}.mhft"
        save_features(directory / name, u)
        names.append(name)
    manifest = directory / "manifest.txt"
    manifest.write_text("".join(n + "\n" for n in names), encoding="utf-8")
    return manifest


def read_manifest(path) -> list[Utterance]:
    path = Path(path)
    utts = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line:
            continue
        p = Path(line)
        utts.append(load_features(p if p.is_absolute() else path.parent / p))
    return utts
