"""Command-line entry point: configuration, run directories, metrics log, orchestration.

Run directory layout::

    <run>/config.json          effective config, written before any compute
    <run>/metrics.jsonl        one JSON object per stage, append-only
    <run>/corpus/              feature files + manifest.txt
    <run>/codebook.npz         k-means codebook
    <run>/checkpoints/stage-N.mhck
    <run>/exports/             CSV series
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import compress as cp
from . import corpus as cc
from . import distill as dd
from . import encoder as enc
from . import probe as pb
from . import profile as pf
from .numcore import AdamHyper, ContractError, NumericError

log = logging.getLogger("melcompress")

RUN_ROOT_ENV = "MELCOMPRESS_RUN_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
TIMING_KEYS = ("timestamp", "timing")


class ConfigError(ContractError):
    pass


@dataclass
class CorpusSection:
    n_utts: int = 400
    manifest: str | None = None
    generator: cc.GeneratorSpec = field(
        default_factory=lambda: cc.GeneratorSpec(noise=0.3, length_range=(40, 80))
    )


@dataclass
class KMeansSection:
    K: int = 32
    iters: int = 20
    standardize: bool = True


@dataclass
class PretrainSection:
    epochs: float = 20.0
    learning_rate: float = 5e-4
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    eval_every: int = 100


@dataclass
class ProbeSection:
    tasks: list = field(default_factory=lambda: ["frame_state", "seq_class"])
    prefixes: list = field(default_factory=lambda: [None, 6, 2])
    config: pb.ProbeConfig = field(default_factory=pb.ProbeConfig)


@dataclass
class ProfileSection:
    repeats: int = 5
    rtf_utts: int = 8


@dataclass
class RunConfig:
    seed: int = 0
    run_name: str = "run"
    output_dir: str | None = None
    split: list = field(default_factory=lambda: [0.8, 0.1, 0.1])
    corpus: CorpusSection = field(default_factory=CorpusSection)
    kmeans: KMeansSection = field(default_factory=KMeansSection)
    encoder: enc.EncoderConfig = field(default_factory=enc.EncoderConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    compress: cp.CompressConfig = field(
        default_factory=lambda: cp.CompressConfig(
            trigger_decay=0.99, trigger_window=200, max_retrain_steps=1000, retrain_steps=300
        )
    )
    distill: dd.DistillConfig = field(default_factory=dd.DistillConfig)
    probe: ProbeSection = field(default_factory=ProbeSection)
    profile: ProfileSection = field(default_factory=ProfileSection)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["compress"] = self.compress.to_dict()
        return d

    def resolve(self) -> "RunConfig":
        """Fill derived defaults so the echoed config is complete."""
        if self.output_dir is None:
            root = os.environ.get(RUN_ROOT_ENV, "runs")
            self.output_dir = str(Path(root) / self.run_name)
        per = 2 if self.encoder.frame_period_ms == 20 else 1
        want = self.corpus.generator.dim * per
        if self.corpus.manifest is None and self.encoder.input_dim != want:
            self.encoder.input_dim = want
        if self.encoder.n_clusters != self.kmeans.K:
            self.encoder.n_clusters = self.kmeans.K
        return self


def _build(cls, data: Any, path: str):
    """Recursively construct dataclass ``cls`` from a dict, rejecting unknown keys."""
    if not dataclasses.is_dataclass(cls) or not isinstance(data, dict):
        return data
    kwargs = {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key, value in data.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {path + key!r}")
        default = fields[key].default_factory() if fields[key].default_factory is not dataclasses.MISSING else None
        sub = type(default) if dataclasses.is_dataclass(default) else None
        kwargs[key] = _build(sub, value, f"{path}{key}.") if sub else value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"invalid config at {path or '<root>'}: {exc}") from exc


def _merge(base: dict, dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = base
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot override inside non-section {dotted!r}")
    node[keys[-1]] = value


def load_config(path: str | None, overrides: list[str] = ()) -> RunConfig:
    data: dict = {}
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        _merge(data, key, value)
    return _build(RunConfig, data, "").resolve()


# ---------------------------------------------------------------------------
# run directory and metrics
# ---------------------------------------------------------------------------


class Run:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.dir = Path(cfg.output_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        (self.dir / "checkpoints").mkdir(exist_ok=True)
        (self.dir / "exports").mkdir(exist_ok=True)
        cfg_json = json.dumps(cfg.to_dict(), sort_keys=True, indent=2)
        (self.dir / "config.json").write_text(cfg_json + "\n", encoding="utf-8")
        ident = {k: v for k, v in cfg.to_dict().items() if k not in ("output_dir", "run_name")}
        self.run_id = hashlib.sha256(json.dumps(ident, sort_keys=True).encode()).hexdigest()[:16]
        self.metrics_path = self.dir / "metrics.jsonl"

    def records(self) -> list[dict]:
        if not self.metrics_path.exists():
            return []
        return [json.loads(l) for l in self.metrics_path.read_text(encoding="utf-8").splitlines() if l.strip()]

    def next_index(self) -> int:
        recs = self.records()
        return recs[-1]["stage_index"] + 1 if recs else 0

    def append(self, stage: str, metrics: dict, checkpoint: dict | None = None, timing: dict | None = None) -> int:
        idx = self.next_index()
        rec = {
            "run_id": self.run_id,
            "stage_index": idx,
            "stage": stage,
            "metrics": metrics,
            "checkpoint": checkpoint,
            "timestamp": time.time(),
            "timing": timing or {},
        }
        with self.metrics_path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return idx

    def save_checkpoint(self, weights: enc.EncoderWeights) -> dict:
        idx = self.next_index()
        rel = f"checkpoints/stage-{idx}.mhck"
        digest = enc.save_checkpoint(self.dir / rel, weights)
        return {"path": rel, "sha256": digest}

    def latest_checkpoint(self, stage: str) -> Path:
        for rec in reversed(self.records()):
            if rec["stage"] == stage and rec.get("checkpoint"):
                return self.dir / rec["checkpoint"]["path"]
        raise ConfigError(f"no {stage} checkpoint in {self.dir}; run `{stage}` first or pass --checkpoint")


def checkpoint_roundtrip(path) -> enc.EncoderWeights:
    """Load a checkpoint, verifying magic, version and checksum."""
    return enc.load_checkpoint(path)


def strip_timing(record: dict) -> dict:
    return {k: v for k, v in record.items() if k not in TIMING_KEYS}


# ---------------------------------------------------------------------------
# data helpers
# ---------------------------------------------------------------------------


def _corpus(run: Run) -> list[cc.Utterance]:
    manifest = run.dir / "corpus" / "manifest.txt"
    if run.cfg.corpus.manifest:
        manifest = Path(run.cfg.corpus.manifest)
    if not manifest.exists():
        raise ConfigError(f"no corpus at {manifest}; run gen-corpus first")
    return cc.read_manifest(manifest)


def _labelled(run: Run):
    """Train/dev/test utterances with cluster labels, spliced for 20 ms models."""
    utts = _corpus(run)
    path = run.dir / "codebook.npz"
    if not path.exists():
        raise ConfigError("no codebook; run kmeans first")
    cc.label_corpus(cc.Codebook.load(path), utts)
    if run.cfg.encoder.frame_period_ms == 20:
        utts = [cc.splice2(u) for u in utts]
    tr, dv, te = pb.split_indices(len(utts), run.cfg.split, run.cfg.seed)
    return [utts[i] for i in tr], [utts[i] for i in dv], [utts[i] for i in te], utts


def _report(run: Run, weights, rtf_utts, n_layers=None) -> tuple[dict, dict]:
    rep = pf.make_report(weights, rtf_utts, run.cfg.profile.repeats, n_layers)
    d = asdict(rep)
    timing = {"rtf": d.pop("rtf"), "rtf_iqr": d.pop("rtf_iqr")}
    d.pop("config")
    return d, timing


def _load(run: Run, args, stage="pretrain") -> enc.EncoderWeights:
    path = Path(args.checkpoint) if getattr(args, "checkpoint", None) else run.latest_checkpoint(stage)
    return enc.load_checkpoint(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_gen_corpus(run: Run, args) -> None:
    spec = run.cfg.corpus.generator
    utts = cc.generate(spec, run.cfg.corpus.n_utts)
    cc.write_corpus(run.dir / "corpus", utts)
    run.append("gen-corpus", {"n_utts": len(utts), "n_frames": int(sum(u.num_frames for u in utts)), "dim": spec.dim})


def cmd_kmeans(run: Run, args) -> None:
    utts = _corpus(run)
    tr, _, _ = pb.split_indices(len(utts), run.cfg.split, run.cfg.seed)
    frames = np.concatenate([utts[i].features for i in tr])
    k = run.cfg.kmeans
    book = cc.kmeans_fit(frames, k.K, k.iters, run.cfg.seed, k.standardize)
    book.save(run.dir / "codebook.npz")
    run.append("kmeans", {"K": book.K, "distortion": book.distortion, "n_frames": len(frames)})


def cmd_pretrain(run: Run, args) -> None:
    tr, dv, _, _ = _labelled(run)
    p = run.cfg.pretrain
    hyper = AdamHyper(p.learning_rate, p.beta1, p.beta2, p.epsilon, p.batch_size)
    t0 = time.perf_counter()
    w, tlog = enc.pretrain(tr, run.cfg.encoder, hyper, p.epochs, seed=run.cfg.seed, dev=dv, eval_every=p.eval_every)
    train_s = time.perf_counter() - t0
    w.meta = {"stage": "pretrain", "adam": asdict(hyper)}
    ck = run.save_checkpoint(w)
    rep, timing = _report(run, w, dv[: run.cfg.profile.rtf_utts])
    timing["train_seconds"] = train_s
    metrics = {
        "steps": len(tlog.losses),
        "final_train_loss": float(np.mean(tlog.losses[-20:])),
        "dev_curve": tlog.dev,
        "dev_loss": enc.eval_loss(w, dv),
        "ln_K": float(np.log(run.cfg.encoder.n_clusters)),
        "report": rep,
    }
    run.append("pretrain", metrics, ck, timing)


def _compress(run: Run, args, technique: str) -> None:
    tr, dv, _, _ = _labelled(run)
    w = _load(run, args)
    cfg = dataclasses.replace(run.cfg.compress, technique=technique)
    if getattr(args, "stop_density", None) is not None:
        cfg.stop_density = args.stop_density
    stage_name = {"weights": "prune-weights", "heads": "prune-heads", "ffn": "prune-ffn"}[technique]

    def on_stage(res: cp.StageResult):
        ck = run.save_checkpoint(res.weights)
        rep, timing = _report(run, res.weights, dv[: run.cfg.profile.rtf_utts])
        metrics = {
            "technique": technique,
            "stage": res.stage,
            "target_density_pct": res.target_pct,
            "density": res.density,
            "dev_loss": res.dev_loss,
            "train_steps": res.train_steps,
            "pruned": res.pruned,
            "report": rep,
        }
        run.append(stage_name, metrics, ck, timing)

    cp.iterative_compress(w, cfg, tr, dv, on_stage)


def cmd_distill(run: Run, args) -> None:
    tr, dv, _, _ = _labelled(run)
    teacher = _load(run, args)
    cfg = run.cfg.distill
    student, dlog = dd.distill(teacher, cfg, tr)
    ck = run.save_checkpoint(student)
    rep, timing = _report(run, student, dv[: run.cfg.profile.rtf_utts])
    losses = dlog.losses
    metrics = {
        "student_layers": cfg.student_layers,
        "init": cfg.init,
        "temperature": cfg.temperature,
        "kd_loss_first": losses[0] if losses else None,
        "kd_loss_last": float(np.mean(losses[-20:])) if losses else None,
        "kd_curve": [losses[i] for i in range(0, len(losses), max(1, len(losses) // 20))],
        "report": rep,
    }
    run.append("distill", metrics, ck, timing)


def _prefix_label(k):
    return "full" if k is None else f"first{k}"


def cmd_probe(run: Run, args) -> None:
    _, _, _, utts = _labelled(run)
    w = _load(run, args)
    sec = run.cfg.probe
    for k in sec.prefixes:
        if k is not None and k > w.config.n_layers:
            continue
        for task in sec.tasks:
            res = pb.train_probe(w, utts, task, sec.config, n_layers=k)
            metrics = {"upstream": _prefix_label(k), **res.to_dict()}
            run.append("probe", metrics)


def cmd_profile(run: Run, args) -> None:
    _, dv, _, _ = _labelled(run)
    w = _load(run, args)
    for k in run.cfg.probe.prefixes:
        if k is not None and k > w.config.n_layers:
            continue
        rep, timing = _report(run, w, dv[: run.cfg.profile.rtf_utts], n_layers=k)
        run.append("profile", {"variant": _prefix_label(k), "report": rep}, None, timing)


def cmd_export_plots(run: Run, args) -> None:
    """Write rtf / MACs-per-second / parameter series per technique as CSV."""
    rows = []
    for rec in run.records():
        m = rec["metrics"]
        rep = m.get("report")
        if rep is None:
            continue
        if rec["stage"].startswith("prune-"):
            technique = m["technique"]
        elif rec["stage"] == "profile":
            technique = f"prefix-{m['variant']}"
        else:
            technique = rec["stage"]
        dens = rep["densities"]
        rows.append(
            {
                "technique": technique,
                "stage_index": rec["stage_index"],
                "density_weights": dens["weights"],
                "density_heads": dens["heads"],
                "density_ffn_dims": dens["ffn_dims"],
                "rtf": rec["timing"].get("rtf"),
                "macs_per_sec": rep["macs_per_sec"],
                "macs_per_sec_theoretical": rep["macs_per_sec_theoretical"],
                "params": rep["params_nonzero"],
            }
        )
    out = run.dir / "exports"
    for series in ("rtf", "macs_per_sec", "params"):
        with (out / f"{series}.csv").open("w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(["technique", "stage_index", "density_weights", "density_heads", "density_ffn_dims", series])
            for r in rows:
                value = r[series]
                if series == "macs_per_sec" and r["macs_per_sec_theoretical"] is not None:
                    value = r["macs_per_sec_theoretical"]
                wr.writerow([r["technique"], r["stage_index"], r["density_weights"], r["density_heads"], r["density_ffn_dims"], value])
    probes = [r["metrics"] for r in run.records() if r["stage"] == "probe"]
    with (out / "probe.csv").open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["upstream", "task", "accuracy", "dev_accuracy", "upstream_hash"])
        for m in probes:
            wr.writerow([m["upstream"], m["task"], m["accuracy"], m["dev_accuracy"], m["upstream_hash"]])


COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "kmeans": cmd_kmeans,
    "pretrain": cmd_pretrain,
    "prune-weights": lambda r, a: _compress(r, a, "weights"),
    "prune-heads": lambda r, a: _compress(r, a, "heads"),
    "prune-ffn": lambda r, a: _compress(r, a, "ffn"),
    "distill": cmd_distill,
    "probe": cmd_probe,
    "profile": cmd_profile,
    "export-plots": cmd_export_plots,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="melcompress", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted override, value parsed as JSON when possible")
        sp.add_argument("--run-dir", help="run directory (overrides output_dir)")
        if name in ("prune-weights", "prune-heads", "prune-ffn", "distill", "probe", "profile"):
            sp.add_argument("--checkpoint", help="input checkpoint (default: latest pretrain checkpoint)")
        if name.startswith("prune-"):
            sp.add_argument("--stop-density", type=float)
    return parser


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.overrides)
        if args.run_dir:
            overrides.append(f"output_dir={json.dumps(args.run_dir)}")
        cfg = load_config(args.config, overrides)
        r = Run(cfg)
        COMMANDS[args.command](r, args)
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, enc.CheckpointError, cc.FeatureParseError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ContractError, ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
