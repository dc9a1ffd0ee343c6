"""Command-line entry point: ``mssenet {synth,extract,train,ablate,export-embeddings,rerun}``.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  Logs go to
stderr; every run writes ``run_manifest.json`` next to its outputs.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    ManifestError,
    StaleCacheError,
    SyntheticSpec,
    cache_features,
    generate_synthetic_corpus,
    load_features,
    load_manifest,
)
from .dsp import DspConfig, FeatureRecordError, WavFormatError
from .model import CheckpointError, ModelConfig, load_checkpoint, save_checkpoint
from .numerics import ConfigurationError
from .training import (
    EvalReport,
    FittedFold,
    Standardizer,
    TrainConfig,
    TrainingError,
    ablation_csv,
    confusion_matrix,
    export_embeddings,
    fit_network,
    predict_proba,
    prepare,
    run_ablation_suite,
    run_cv,
    stratified_holdout,
    uar_war,
)

log = logging.getLogger("mssenet")

RUN_MANIFEST = "run_manifest.json"


class UsageError(Exception):
    pass


def default_config() -> dict:
    model = ModelConfig().to_dict()
    del model["n_classes"]  # taken from the manifest
    return {
        "dsp": DspConfig().to_dict(),
        "model": model,
        "train": TrainConfig().to_dict(),
        "synth": {k: v for k, v in SyntheticSpec().__dict__.items()},
    }


def deep_merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        where = f"{path}.{k}" if path else k
        if k not in out:
            raise UsageError(f"unknown config key {where!r}")
        if isinstance(out[k], dict) and isinstance(v, dict):
            out[k] = deep_merge(out[k], v, where)
        else:
            out[k] = v
    return out


def resolve_config(args) -> dict:
    cfg = default_config()
    if args.config:
        p = Path(args.config)
        if not p.is_file():
            raise UsageError(f"config file {p} does not exist")
        try:
            cfg = deep_merge(cfg, json.loads(p.read_text()))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {p} is not valid JSON: {exc}") from None
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
        cfg["synth"]["seed"] = args.seed
    return cfg


def build_fingerprint() -> dict:
    commit = None
    try:
        commit = subprocess.run(["git", "rev-parse", "HEAD"], cwd=Path(__file__).parent, capture_output=True,
                                text=True, timeout=5).stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        pass
    return {"package_version": __version__, "git_commit": commit, "numpy": np.__version__}


class Run:
    """Collects what a command did and writes the run manifest."""

    def __init__(self, command: str, argv: list[str], config: dict, out_dir: Path):
        self.command = command
        self.argv = argv
        self.config = config
        self.out_dir = out_dir
        self.outputs: list[str] = []
        self.started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        self.extra: dict = {}

    def output(self, path) -> Path:
        self.outputs.append(str(Path(path)))
        return Path(path)

    def finish(self):
        self.out_dir.mkdir(parents=True, exist_ok=True)
        doc = {
            "command": self.command,
            "argv": self.argv,
            "config": self.config,
            "seed": self.config["train"]["seed"],
            "fingerprint": build_fingerprint(),
            "started_at": self.started,
            "finished_at": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "outputs": self.outputs,
            **self.extra,
        }
        (self.out_dir / RUN_MANIFEST).write_text(json.dumps(doc, indent=2, sort_keys=True))


def _manifest(args):
    if not args.manifest or not Path(args.manifest).is_file():
        raise UsageError(f"manifest {args.manifest!r} does not exist")
    return load_manifest(args.manifest)


def _out_dir(args) -> Path:
    if not args.out:
        raise UsageError("--out is required")
    return Path(args.out)


def _model_cfg(cfg: dict, n_classes: int) -> ModelConfig:
    return ModelConfig.from_dict({**cfg["model"], "n_classes": n_classes})


def _features(manifest, cfg, args):
    dsp = DspConfig(**cfg["dsp"])
    return load_features(manifest, dsp, getattr(args, "cache", None), n_jobs=args.threads)


def _checkpoint_extra(cfg, fitted: FittedFold, class_names) -> dict:
    return {"dsp": cfg["dsp"], "train": cfg["train"], "classes": list(class_names),
            "scaler": fitted.scaler.to_dict(), "pad_frames": fitted.pad_frames,
            "loss_curve": fitted.loss_curve}


# ---------------------------------------------------------------- commands

def cmd_synth(args, run: Run):
    spec = SyntheticSpec(**run.config["synth"])
    if args.classes is not None:
        spec.n_classes = args.classes
    if args.clips is not None:
        spec.clips_per_class = args.clips
    run.config["synth"] = dict(spec.__dict__)
    manifest = generate_synthetic_corpus(spec, run.out_dir)
    run.output(manifest)
    print(manifest)


def cmd_extract(args, run: Run):
    manifest = _manifest(args)
    idx = cache_features(manifest, DspConfig(**run.config["dsp"]), run.out_dir, n_jobs=args.threads)
    run.output(run.out_dir / "index.json")
    print(run.out_dir / "index.json")
    log.info("cached %d utterances", len(idx))


def cmd_train(args, run: Run):
    manifest = _manifest(args)
    cfg = run.config
    feats = _features(manifest, cfg, args)
    y = manifest.labels()
    mcfg = _model_cfg(cfg, manifest.n_classes)
    tcfg = TrainConfig.from_dict(cfg["train"])
    out = run.out_dir
    out.mkdir(parents=True, exist_ok=True)
    names = manifest.class_names
    if args.mode == "cv":
        report, fitted = run_cv(feats, y, mcfg, tcfg, names, n_jobs=args.threads, keep_models=True)
        for i, fit in enumerate(fitted):
            save_checkpoint(run.output(out / f"fold_{i:02d}.ckpt"), fit.model, _checkpoint_extra(cfg, fit, names))
    else:
        train, test = stratified_holdout(y, 0.2, tcfg.seed)
        pad = tcfg.pad_frames or max(f.shape[0] for f in feats)
        fit = fit_network([feats[i] for i in train], y[train], mcfg, tcfg, pad)
        pred = predict_proba(fit.model, prepare([feats[i] for i in test], fit.scaler, pad)).argmax(axis=1)
        cm = confusion_matrix(y[test], pred, manifest.n_classes)
        uar, war = uar_war(cm)
        report = EvalReport.from_folds([{
            "fold": "holdout", "seed": tcfg.seed, "n_train": int(train.size), "n_test": int(test.size),
            "uar": uar, "war": war, "confusion": cm, "test_index": test.tolist(),
            "final_loss": fit.loss_curve[-1] if fit.loss_curve else None}], names)
        save_checkpoint(run.output(out / "model.ckpt"), fit.model, _checkpoint_extra(cfg, fit, names))
    (out / "report.json").write_text(report.to_json())
    run.output(out / "report.json")
    print(json.dumps({"uar": report.uar, "war": report.war}))


def cmd_ablate(args, run: Run):
    manifest = _manifest(args)
    cfg = run.config
    feats = _features(manifest, cfg, args)
    tcfg = TrainConfig.from_dict(cfg["train"])
    reports = run_ablation_suite(feats, manifest.labels(), _model_cfg(cfg, manifest.n_classes), tcfg,
                                 manifest.class_names, n_jobs=args.threads)
    out = run.out_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.csv").write_text(ablation_csv(reports))
    run.output(out / "ablation.csv")
    (out / "ablation.json").write_text(json.dumps({v: r.to_dict() for v, r in reports.items()}, indent=2,
                                                  sort_keys=True))
    run.output(out / "ablation.json")
    run.extra["variant_seeds"] = {v: [f["seed"] for f in r.per_fold] for v, r in reports.items()}
    run.extra["variant_folds"] = {v: [f["test_index"] for f in r.per_fold] for v, r in reports.items()}
    print(out / "ablation.csv")


def _check_against_checkpoint(overrides: dict, model_cfg: ModelConfig, extra: dict):
    """Name the first explicitly configured field that disagrees with the checkpoint."""
    for k, v in overrides.get("model", {}).items():
        have = getattr(model_cfg, k)
        if k == "tff_kernels":
            v = [list(x) for x in v]
        if have != v:
            raise CheckpointError(f"config field model.{k}={v!r} does not match checkpoint value {have!r}")
    for k, v in overrides.get("dsp", {}).items():
        if extra["dsp"].get(k) != v:
            raise CheckpointError(f"config field dsp.{k}={v!r} does not match checkpoint value {extra['dsp'].get(k)!r}")


def cmd_export_embeddings(args, run: Run):
    if not args.checkpoint or not Path(args.checkpoint).is_file():
        raise UsageError(f"checkpoint {args.checkpoint!r} does not exist")
    manifest = _manifest(args)
    model, extra = load_checkpoint(args.checkpoint)
    if args.config:
        _check_against_checkpoint(json.loads(Path(args.config).read_text()), model.cfg, extra)
    run.config["dsp"] = extra["dsp"]
    run.config["model"] = {k: v for k, v in model.cfg.to_dict().items() if k != "n_classes"}
    feats = _features(manifest, run.config, args)
    fitted = FittedFold(model, Standardizer.from_dict(extra["scaler"]), extra["pad_frames"], [])
    target = Path(args.out)
    if target.suffix.lower() != ".csv":
        target = target / "embeddings.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    run.out_dir = target.parent
    export_embeddings(fitted, feats, [e.utterance_id for e in manifest.entries],
                      [e.label for e in manifest.entries], target)
    run.output(target)
    print(target)


def cmd_rerun(args):
    src = Path(args.run_manifest)
    if not src.is_file():
        raise UsageError(f"run manifest {src} does not exist")
    doc = json.loads(src.read_text())
    out = _out_dir(args)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = out / "config.snapshot.json"
    snap = {k: v for k, v in doc["config"].items() if k in default_config()}
    snapshot.write_text(json.dumps(snap, indent=2, sort_keys=True))
    argv = _replace_flag(_replace_flag(list(doc["argv"]), "--out", str(out)), "--config", str(snapshot))
    log.info("replaying: %s", " ".join(argv))
    return main(argv)


def _replace_flag(argv: list[str], flag: str, value: str) -> list[str]:
    out = []
    skip = False
    for i, a in enumerate(argv):
        if skip:
            skip = False
            continue
        if a == flag:
            skip = True
            continue
        if a.startswith(flag + "="):
            continue
        out.append(a)
    return out + [flag, value]


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override every seed in the config")
    common.add_argument("--threads", type=_positive_int, default=1, help="worker count for extraction / folds")
    common.add_argument("--config", default=None, help="JSON overrides merged onto the defaults")
    common.add_argument("--out", default=None, help="output directory (or CSV path for export-embeddings)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mssenet", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic labelled corpus")
    s.add_argument("--classes", type=_positive_int, default=None)
    s.add_argument("--clips", type=_positive_int, default=None)

    e = sub.add_parser("extract", parents=[common], help="cache MFCC features for a manifest")
    e.add_argument("--manifest", required=True)

    for name in ("train", "ablate"):
        t = sub.add_parser(name, parents=[common],
                           help="train and evaluate" if name == "train" else "run the five-variant ablation")
        t.add_argument("--manifest", required=True)
        t.add_argument("--cache", default=None, help="feature cache directory to use/create")
        if name == "train":
            t.add_argument("--mode", choices=("cv", "holdout"), default="cv")

    x = sub.add_parser("export-embeddings", parents=[common], help="write fused embeddings as CSV")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--manifest", required=True)

    r = sub.add_parser("rerun", parents=[common], help="replay a run from its run_manifest.json")
    r.add_argument("run_manifest")
    return p


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


COMMANDS = {
    "synth": cmd_synth,
    "extract": cmd_extract,
    "train": cmd_train,
    "ablate": cmd_ablate,
    "export-embeddings": cmd_export_embeddings,
}

RUNTIME_ERRORS = (TrainingError, StaleCacheError, CheckpointError, ManifestError, WavFormatError,
                  FeatureRecordError, ConfigurationError, OSError, ValueError)


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "rerun":
            return cmd_rerun(args)
        cfg = resolve_config(args)
        if args.command != "export-embeddings":
            out = _out_dir(args)
        else:
            if not args.out:
                raise UsageError("--out is required")
            out = Path(args.out)
        run = Run(args.command, argv, cfg, out)
        COMMANDS[args.command](args, run)
        run.finish()
        return 0
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mssenet: error: {exc}", file=sys.stderr)
        return 2
    except RUNTIME_ERRORS as exc:
        print(f"mssenet: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())
