"""Cost accounting: parameter counts, analytic MACs per second of speech, real-time factor."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import numcore as nc
from .compress import densities
from .corpus import Utterance
from .encoder import EncoderWeights, forward
from .numcore import ContractError

MAC_TAGS = ("input_projection", "attn_proj", "attn_scores", "attn_values", "ffn", "classifier")


def frames_per_second(frame_period_ms: int) -> int:
    if frame_period_ms not in (10, 20):
        raise ContractError(f"unsupported frame period {frame_period_ms} ms")
    return 1000 // frame_period_ms


@dataclass
class ParamCount:
    total: int
    nonzero: int
    prunable_total: int
    prunable_nonzero: int
    input_projection: int
    classifier: int


def count_params(weights: EncoderWeights) -> ParamCount:
    """Entries of the Transformer blocks; input projection and classifier are reported apart.

    ``nonzero`` leaves out entries zeroed by a prune mask.
    """
    total = nonzero = ptotal = pnonzero = 0
    prunable = set(weights.prunable_names())
    for n in weights.block_names():
        p = weights[n]
        alive = p.data.size if p.mask is None else int(np.count_nonzero(p.mask))
        total += p.data.size
        nonzero += alive
        if n in prunable:
            ptotal += p.data.size
            pnonzero += alive
    inp = weights["in_proj.weight"].data.size + weights["in_proj.bias"].data.size
    cls = weights["classifier.weight"].data.size + weights["classifier.bias"].data.size
    return ParamCount(total, nonzero, ptotal, pnonzero, inp, cls)


def block_params_closed_form(L: int, d: int, f: int) -> int:
    # QKVO with biases, FC1/FC2 with biases, two layer norms
    return L * (4 * d * d + 4 * d + 2 * d * f + d + f + 4 * d)


@dataclass
class MacsBreakdown:
    frames: int
    input_projection: int
    attn_proj: int
    attn_quadratic: int
    ffn: int
    classifier: int = 0
    theoretical: int | None = None
    per_layer: list[int] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.input_projection + self.attn_proj + self.attn_quadratic + self.ffn + self.classifier


def macs_per_second(
    weights: EncoderWeights,
    frame_period_ms: int | None = None,
    n_layers: int | None = None,
    include_classifier: bool = False,
) -> MacsBreakdown:
    """Analytic multiply-accumulate count for one second of frames.

    Only matmul multiplies are counted. Per layer with H' live heads and f'
    live FFN units: 4*T*d*H'*d_h for the Q/K/V/O projections,
    2*T^2*H'*d_h for scores and the weighted value sum, and 2*T*d*f' for the
    FFN. When block weights carry prune masks, ``theoretical`` counts only
    multiplies by unmasked weights.
    """
    cfg = weights.config
    T = frames_per_second(cfg.frame_period_ms if frame_period_ms is None else frame_period_ms)
    depth = cfg.n_layers if n_layers is None else n_layers
    if not 0 <= depth <= cfg.n_layers:
        raise ContractError(f"layer count {depth} outside [0, {cfg.n_layers}]")
    d, dh = cfg.d_model, cfg.head_dim
    inp = T * cfg.input_dim * d
    proj = quad = ffn = 0
    per_layer = []
    masked = False
    theo = inp
    for i in range(depth):
        width = weights.layer_heads(i) * dh
        f = weights.layer_ffn(i)
        lp, lq, lf = 4 * T * d * width, 2 * T * T * width, 2 * T * d * f
        proj, quad, ffn = proj + lp, quad + lq, ffn + lf
        per_layer.append(lp + lq + lf)
        theo += lq
        for name in ("q", "k", "v", "o", "fc1", "fc2"):
            p = weights[f"layers.{i}.{name}.weight"]
            if p.mask is not None:
                masked = True
                theo += T * int(np.count_nonzero(p.mask))
            else:
                theo += T * p.data.size
    cls = T * d * cfg.n_clusters if include_classifier else 0
    return MacsBreakdown(T, inp, proj, quad, ffn, cls, (theo + cls) if masked else None, per_layer)


def instrumented_macs(
    weights: EncoderWeights,
    frame_period_ms: int | None = None,
    n_layers: int | None = None,
    include_classifier: bool = False,
    seed: int = 0,
) -> dict[str, int]:
    """Run a real forward pass over one second of random frames and tally every matmul."""
    cfg = weights.config
    T = frames_per_second(cfg.frame_period_ms if frame_period_ms is None else frame_period_ms)
    x = np.random.default_rng(seed).standard_normal((1, T, cfg.input_dim))
    with nc.no_grad(), nc.count_macs() as entries:
        forward(weights, x, n_layers=n_layers, with_logits=include_classifier)
    tally = {t: 0 for t in MAC_TAGS}
    for tag, n in entries:
        tally[tag] += n
    tally["total"] = sum(v for k, v in tally.items() if k in MAC_TAGS)
    return tally


@dataclass
class RtfStats:
    median: float
    q1: float
    q3: float
    samples: list[float]

    @property
    def iqr(self) -> float:
        return self.q3 - self.q1


def measure_rtf(
    weights: EncoderWeights,
    utterances: Sequence[Utterance],
    repeats: int = 5,
    n_layers: int | None = None,
) -> RtfStats:
    """Wall-clock inference seconds per second of speech, single-threaded.

    One warm-up pass is discarded. Masked (weight-pruned) models run dense.
    """
    if not utterances:
        raise ContractError("measure_rtf needs at least one utterance")
    if repeats < 3:
        raise ContractError("measure_rtf needs repeats >= 3")
    period = weights.config.frame_period_ms
    speech = sum(u.num_frames for u in utterances) * period / 1000.0
    inputs = [u.features[None] for u in utterances]

    def run():
        with nc.no_grad():
            for x in inputs:
                forward(weights, x, n_layers=n_layers)

    samples = []
    with threadpool_limits(limits=1):
        run()
        for _ in range(repeats):
            t0 = time.perf_counter()
            run()
            samples.append((time.perf_counter() - t0) / speech)
    q1, med, q3 = np.percentile(samples, [25, 50, 75])
    return RtfStats(float(med), float(q1), float(q3), samples)


@dataclass
class CompressionReport:
    params_total: int
    params_nonzero: int
    macs_per_sec: int
    macs_per_sec_theoretical: int | None
    rtf: float | None
    rtf_iqr: float | None
    densities: dict
    frame_period_ms: int
    n_layers: int
    config: dict

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def make_report(
    weights: EncoderWeights,
    utterances: Sequence[Utterance] | None = None,
    repeats: int = 5,
    n_layers: int | None = None,
) -> CompressionReport:
    """Collect parameters, MACs and (if ``utterances`` are given) RTF for one checkpoint."""
    pc = count_params(weights)
    macs = macs_per_second(weights, n_layers=n_layers)
    rtf = measure_rtf(weights, utterances, repeats, n_layers) if utterances else None
    depth = weights.config.n_layers if n_layers is None else n_layers
    total, nonzero = pc.total, pc.nonzero
    if depth < weights.config.n_layers:
        # a prefix model only owns its first `depth` blocks
        names = [n for n in weights.block_names() if int(n.split(".")[1]) < depth]
        total = sum(weights[n].data.size for n in names)
        nonzero = sum(
            weights[n].data.size if weights[n].mask is None else int(np.count_nonzero(weights[n].mask)) for n in names
        )
    return CompressionReport(
        params_total=total,
        params_nonzero=nonzero,
        macs_per_sec=macs.total,
        macs_per_sec_theoretical=macs.theoretical,
        rtf=None if rtf is None else rtf.median,
        rtf_iqr=None if rtf is None else rtf.iqr,
        densities=densities(weights),
        frame_period_ms=weights.config.frame_period_ms,
        n_layers=depth,
        config=weights.config.to_dict(),
    )
