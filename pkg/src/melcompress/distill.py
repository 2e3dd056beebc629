"""Output-level knowledge distillation into shallower students."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import numcore as nc
from .corpus import Utterance
from .encoder import (
    DivergenceError,
    EncoderWeights,
    TrainLog,
    batch_masks,
    forward,
    init_weights,
    iterate_batches,
    pad_batch,
)
from .numcore import AdamHyper, ContractError, NumericError, Parameter, Tensor


@dataclass
class DistillConfig:
    student_layers: int = 2
    init: str = "teacher_first_k"  # teacher_first_k | random
    temperature: float = 1.0
    mask_student_input: bool = False
    steps: int = 1000
    learning_rate: float = 1e-4
    batch_size: int = 8
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.init not in ("teacher_first_k", "random"):
            raise ContractError(f"unknown student init {self.init!r}")
        if not self.temperature > 0:
            raise ContractError("temperature must be positive")
        if self.student_layers < 0:
            raise ContractError("student_layers must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def build_student(teacher: EncoderWeights, cfg: DistillConfig) -> EncoderWeights:
    """Student of the teacher's width with ``cfg.student_layers`` blocks."""
    tcfg = teacher.config
    k = cfg.student_layers
    if cfg.init == "teacher_first_k" and k > tcfg.n_layers:
        raise ContractError(f"student of {k} layers cannot copy a {tcfg.n_layers}-layer teacher")
    scfg = copy.deepcopy(tcfg)
    scfg.n_layers = k
    scfg.dropout = cfg.dropout
    if cfg.init == "random":
        student = init_weights(scfg, seed=cfg.seed)
    else:
        params = {}
        for n, p in teacher.params.items():
            if n.startswith("layers.") and int(n.split(".")[1]) >= k:
                continue
            params[n] = Parameter(p.data, p.mask)
        student = EncoderWeights(scfg, params)
    student.meta = {"student_of": teacher.digest(), "distill": cfg.to_dict()}
    return student


def kd_loss(teacher_logits, student_logits: Tensor, temperature: float = 1.0, weights=None) -> Tensor:
    """Mean over frames of tau^2 * KL(softmax(t/tau) || softmax(s/tau)).

    ``weights`` optionally replaces the uniform frame weighting (e.g. to skip
    padding); it should sum to one.
    """
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=np.float64)
    s = nc.as_tensor(student_logits)
    if t.shape != s.shape:
        raise ContractError(f"teacher logits {t.shape} vs student logits {s.shape}")
    if not temperature > 0:
        raise ContractError("temperature must be positive")
    if weights is None:
        weights = np.full(t.shape[:-1], 1.0 / int(np.prod(t.shape[:-1])))
    return nc.kl_divergence(t, s, weights, temperature)


def distill(
    teacher: EncoderWeights,
    cfg: DistillConfig,
    corpus: Sequence[Utterance],
    student: EncoderWeights | None = None,
) -> tuple[EncoderWeights, TrainLog]:
    """Train a student on the teacher's frame posteriors.

    The teacher runs in inference mode. With ``mask_student_input`` both
    networks see the same span-masked input, otherwise both see clean input.
    """
    if not corpus:
        raise ContractError("empty corpus")
    if student is None:
        student = build_student(teacher, cfg)
    rng = np.random.default_rng(cfg.seed)
    hyper = AdamHyper(learning_rate=cfg.learning_rate, batch_size=cfg.batch_size)
    batches = iterate_batches(len(corpus), cfg.batch_size, rng)
    log = TrainLog()
    last_good = student.copy()
    for step in range(1, cfg.steps + 1):
        _, idx = next(batches)
        utts = [corpus[i] for i in idx]
        x, _, lengths = pad_batch(utts)
        lens = lengths if len(set(lengths)) > 1 else None
        fm = batch_masks(lengths, teacher.config.masking, rng) if cfg.mask_student_input else None
        try:
            with nc.no_grad():
                t_logits = forward(teacher, x, fm, lengths=lens, training=False).logits.data
            student.zero_grad()
            res = forward(student, x, fm, lengths=lens, training=True, rng=rng)
            valid = (np.arange(x.shape[1])[None, :] < lengths[:, None]).astype(np.float64)
            loss = kd_loss(t_logits, res.logits, cfg.temperature, valid / valid.sum())
            nc.backward(loss)
            nc.adam_step([p for p in student.parameters() if p.grad is not None], hyper)
        except NumericError as exc:
            raise DivergenceError(str(exc), last_good, step) from exc
        log.steps.append(step)
        log.losses.append(float(loss.data))
        if step % 50 == 0:
            last_good = student.copy()
    return student, log
