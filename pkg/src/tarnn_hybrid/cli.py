"""``tarnn`` command line: one subcommand per pipeline stage.

Every stage reads a JSON config (``--config``) with ``--set key=value``
overrides, takes its inputs from earlier stages under ``--run-dir`` and
writes into its own subdirectory there together with ``manifest.json``.
A stage directory is built in a scratch location and moved into place only
on success, so failures leave no partial outputs.  Existing outputs are
refused unless ``--overwrite`` is given.

Errors are printed to stderr as one JSON line, e.g.
``{"error": "config", "exit_code": 3, "message": "..."}``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from . import __version__
from .cohort import load_cohort, split_patients
from .errors import ConfigError, TarnnError
from .evaluate import DEFAULT_VARIANTS, evaluate_model, run_ablation, run_multiseed
from .interpret import generate_report, plot_report
from .model import forward, load_checkpoint, read_checkpoint_manifest, save_checkpoint
from .ontology import load_bundle_dir, load_matrix, save_matrix
from .pipeline import PipelineConfig, make_cohort, make_matrix, make_ontology, model_config_for
from .preprocess import (NormStats, assemble_dataset, dataset_manifest, fit_preprocessing, load_samples,
                         save_samples, stack_samples)
from .train import train_model

log = logging.getLogger("tarnn_hybrid")

STAGES = ("gen-ontology", "gen-cohort", "build-embeddings", "preprocess", "train", "evaluate", "ablate",
          "multiseed", "explain")
_OUT = {s: s.replace("-", "_") for s in STAGES}


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(pairs: Sequence[str]) -> Dict[str, object]:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = _parse_value(value)
    return out


def _seeds(text: str) -> List[int]:
    """``5`` means seeds 0..4; ``3,7,11`` lists seeds explicitly."""
    try:
        if "," in text:
            return [int(s) for s in text.split(",") if s.strip()]
        return list(range(int(text)))
    except ValueError:
        raise ConfigError(f"--seeds expects a count or a comma list, got {text!r}") from None


class Stage:
    """Scratch output directory for one command plus the manifest bookkeeping."""

    def __init__(self, name: str, args, config: PipelineConfig):
        self.name = name
        self.args = args
        self.config = config
        self.run_dir = Path(args.run_dir)
        self.final = self.run_dir / _OUT[name]
        self.scratch = self.run_dir / f".{_OUT[name]}.partial"
        self.inputs: Dict[str, Path] = {}
        self.timings: Dict[str, float] = {}
        self.seed: Optional[int] = None
        self._t0 = time.perf_counter()

    def input(self, label: str, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"missing input {label}: {path}")
        self.inputs[label] = path
        return path

    def begin(self):
        if self.final.exists() and not self.args.overwrite:
            raise ConfigError(f"{self.final} already exists; pass --overwrite to replace it")
        if self.scratch.exists():
            shutil.rmtree(self.scratch)
        self.scratch.mkdir(parents=True)
        return self.scratch

    def lap(self, label: str):
        now = time.perf_counter()
        self.timings[label] = round(now - self._t0, 3)

    def commit(self, extra: Optional[Dict] = None):
        artifacts = {}
        for p in sorted(self.scratch.rglob("*")):
            if p.is_file():
                artifacts[str(p.relative_to(self.scratch))] = _sha256(p)
        digests = {}
        for label, p in self.inputs.items():
            if p.is_dir():
                digests[label] = {str(q.relative_to(p)): _sha256(q) for q in sorted(p.rglob("*"))
                                  if q.is_file() and q.name != "manifest.json"}
            else:
                digests[label] = _sha256(p)
        self.lap("total")
        manifest = {
            "command": self.name,
            "argv": list(self.args.argv),
            "config": self.config.to_dict(),
            "seed": self.seed,
            "inputs": {k: str(v) for k, v in self.inputs.items()},
            "input_digests": digests,
            "artifacts": artifacts,
            "timings_s": self.timings,
            "version": __version__,
        }
        manifest.update(extra or {})
        (self.scratch / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n",
                                                    encoding="utf-8")
        if self.final.exists():
            shutil.rmtree(self.final)
        self.scratch.rename(self.final)
        print(self.final)

    def abort(self):
        if self.scratch.exists():
            shutil.rmtree(self.scratch, ignore_errors=True)


def _path(args, attr, default_rel):
    value = getattr(args, attr, None)
    return Path(value) if value else Path(args.run_dir) / default_rel


# --------------------------------------------------------------------------
# commands


def cmd_gen_ontology(stage: Stage):
    out = stage.begin()
    bundle = make_ontology(stage.config)
    bundle.save(out)
    stage.seed = stage.config.ontology.seed
    stage.commit({"n_concepts": len(bundle.concepts), "n_codes": len(bundle.icd_mapping)})


def cmd_gen_cohort(stage: Stage):
    bundle = load_bundle_dir(stage.input("ontology", _path(stage.args, "ontology", "gen_ontology")))
    out = stage.begin()
    cohort = make_cohort(stage.config, bundle)
    cohort.write(out / "visits.csv")
    stage.seed = stage.config.cohort.seed
    stage.commit({"n_patients": len(cohort)})


def cmd_build_embeddings(stage: Stage):
    bundle = load_bundle_dir(stage.input("ontology", _path(stage.args, "ontology", "gen_ontology")))
    cohort = load_cohort(stage.input("cohort", _path(stage.args, "cohort", "gen_cohort/visits.csv")))
    out = stage.begin()
    matrix = make_matrix(stage.config, cohort, bundle)
    save_matrix(matrix, out / "matrix.f32")
    stage.seed = stage.config.embedding.graph.seed
    stage.commit({"shape": list(matrix.rows.shape), "unmapped_fraction": matrix.unmapped_fraction,
                  "record_unmapped_fraction": matrix.record_unmapped_fraction(cohort.all_codes())})


def cmd_preprocess(stage: Stage):
    cohort = load_cohort(stage.input("cohort", _path(stage.args, "cohort", "gen_cohort/visits.csv")))
    matrix = load_matrix(stage.input("matrix", _path(stage.args, "matrix", "build_embeddings/matrix.f32")))
    pc = stage.config.preprocess
    out = stage.begin()
    train, test = split_patients(cohort, pc.test_fraction, pc.seed)
    stats = fit_preprocessing(train, pc)
    train_samples = assemble_dataset(train, pc, stats, matrix)
    test_samples = assemble_dataset(test, pc, stats, matrix)
    if not train_samples or not test_samples:
        raise ConfigError("split leaves no windows in train or test")
    save_samples(train_samples, out / "train.npz")
    save_samples(test_samples, out / "test.npz")
    (out / "norm_stats.json").write_text(json.dumps(stats.to_dict(), indent=1, sort_keys=True) + "\n",
                                         encoding="utf-8")
    stage.seed = pc.seed
    stage.commit({"train": dataset_manifest(train_samples), "test": dataset_manifest(test_samples)})


def _load_data(stage: Stage):
    data_dir = stage.input("data", _path(stage.args, "data", "preprocess"))
    matrix = load_matrix(stage.input("matrix", _path(stage.args, "matrix", "build_embeddings/matrix.f32")))
    stats = NormStats.from_dict(json.loads((data_dir / "norm_stats.json").read_text(encoding="utf-8")))
    train = load_samples(data_dir / "train.npz")
    test = load_samples(data_dir / "test.npz")
    return matrix, stats, train, test


def cmd_train(stage: Stage):
    matrix, stats, train, _ = _load_data(stage)
    out = stage.begin()
    mc = model_config_for(stage.config, matrix, stats)
    model, history = train_model(stack_samples(train), stage.config.train, mc, matrix)
    stage.lap("fit")
    (out / "history.tsv").write_text(history.to_tsv(), encoding="utf-8")
    save_checkpoint(model, out / "checkpoint.bin",
                    {"threshold": history.chosen_threshold, "best_epoch": history.best_epoch})
    stage.seed = stage.config.train.seed
    stage.commit({"threshold": history.chosen_threshold, "best_epoch": history.best_epoch,
                  "epochs_run": history.epochs_run})


def _checkpoint(stage: Stage):
    return stage.input("checkpoint", _path(stage.args, "checkpoint", "train/checkpoint.bin"))


def cmd_evaluate(stage: Stage):
    ckpt = _checkpoint(stage)
    matrix, _, _, test = _load_data(stage)
    threshold = stage.args.threshold
    if threshold is None:
        threshold = read_checkpoint_manifest(ckpt).get("threshold", 0.5)
    model = load_checkpoint(ckpt, matrix)
    out = stage.begin()
    report = evaluate_model(model, stack_samples(test), float(threshold))
    fields = list(report.to_dict())
    (out / "metrics.tsv").write_text("\t".join(fields) + "\n" + "\t".join(repr(v) for v in report.to_dict().values())
                                     + "\n", encoding="utf-8")
    stage.commit({"metrics": report.to_dict()})


def cmd_ablate(stage: Stage):
    matrix, stats, train, test = _load_data(stage)
    seeds = _seeds(stage.args.seeds)
    out = stage.begin()
    mc = model_config_for(stage.config, matrix, stats)
    result = run_ablation(stack_samples(train), stack_samples(test), stage.config.train, mc, matrix,
                          DEFAULT_VARIANTS, seeds)
    (out / "ablation.tsv").write_text(result.to_tsv(), encoding="utf-8")
    (out / "summary.tsv").write_text(result.summary_tsv(), encoding="utf-8")
    stage.seed = seeds
    stage.commit({"auc_wins_of_full": result.wins(), "study": result.to_dict()})


def cmd_multiseed(stage: Stage):
    matrix, stats, train, test = _load_data(stage)
    seeds = _seeds(stage.args.seeds)
    out = stage.begin()
    mc = model_config_for(stage.config, matrix, stats)
    study = run_multiseed(stack_samples(train), stack_samples(test), stage.config.train, mc, matrix, seeds)
    (out / "per_seed.tsv").write_text(study.to_tsv(), encoding="utf-8")
    (out / "summary.tsv").write_text(study.summary_tsv(), encoding="utf-8")
    stage.seed = seeds
    stage.commit({"study": study.to_dict()})


def cmd_explain(stage: Stage):
    ckpt = _checkpoint(stage)
    matrix, _, train, test = _load_data(stage)
    pid = stage.args.patient_id
    windows = [s for s in train + test if s.patient_id == pid]
    if not windows:
        raise ConfigError(f"patient {pid!r} has no windows in the preprocessed data")
    if stage.args.window is None:
        sample = max(windows, key=lambda s: s.window_start)
    else:
        matches = [s for s in windows if s.window_start == stage.args.window]
        if not matches:
            raise ConfigError(f"patient {pid!r} has no window starting at {stage.args.window}")
        sample = matches[0]
    meta = read_checkpoint_manifest(ckpt)
    model = load_checkpoint(ckpt, matrix)
    out = stage.begin()
    output = forward(model, sample).sample(0)
    report = generate_report(sample, output, matrix,
                             {"checkpoint_sha256": meta["sha256"], "threshold": meta.get("threshold", 0.5)})
    path = out / f"report_{pid}_w{sample.window_start}.json"
    path.write_text(report.to_json(), encoding="utf-8")
    if stage.args.plots:
        plot_report(report, out / "plots")
    stage.commit({"report": path.name})


COMMANDS = {
    "gen-ontology": cmd_gen_ontology,
    "gen-cohort": cmd_gen_cohort,
    "build-embeddings": cmd_build_embeddings,
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "multiseed": cmd_multiseed,
    "explain": cmd_explain,
}

_HELP = {
    "gen-ontology": "generate a synthetic ontology bundle",
    "gen-cohort": "generate a synthetic cohort over an ontology",
    "build-embeddings": "build the frozen code-embedding matrix",
    "preprocess": "split, normalize and window a cohort",
    "train": "train a model and pick the F2-optimal threshold",
    "evaluate": "score a checkpoint on the test windows",
    "ablate": "train every ablation variant on several seeds",
    "multiseed": "repeat training over seeds and summarize",
    "explain": "write an attribution report for one patient window",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tarnn", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name in STAGES:
        p = sub.add_parser(name, help=_HELP[name], description=_HELP[name])
        p.add_argument("--run-dir", default=os.environ.get("TARNN_RUN_DIR"),
                       help="workspace directory (env TARNN_RUN_DIR)")
        p.add_argument("--config", help="JSON pipeline config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. train.max_epochs=5 (repeatable)")
        p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
        p.add_argument("--log-level", default=os.environ.get("TARNN_LOG_LEVEL", "WARNING"))
        if name in ("gen-cohort", "build-embeddings"):
            p.add_argument("--ontology", help="ontology bundle directory")
        if name in ("build-embeddings", "preprocess"):
            p.add_argument("--cohort", help="cohort visits file")
        if name in ("preprocess", "train", "evaluate", "ablate", "multiseed", "explain"):
            p.add_argument("--matrix", help="embedding matrix file")
        if name in ("train", "evaluate", "ablate", "multiseed", "explain"):
            p.add_argument("--data", help="preprocessed data directory")
        if name in ("evaluate", "explain"):
            p.add_argument("--checkpoint", help="trained checkpoint file")
        if name == "evaluate":
            p.add_argument("--threshold", type=float, help="decision threshold (default: from checkpoint)")
        if name in ("ablate", "multiseed"):
            p.add_argument("--seeds", default="5", help="seed count or comma list (default 5)")
        if name == "explain":
            p.add_argument("--patient-id", required=True)
            p.add_argument("--window", type=int, help="window start (default: latest window)")
            p.add_argument("--plots", action="store_true", help="also write PNG figures")
    return parser


def _error_line(kind: str, code: int, message: str) -> str:
    return json.dumps({"error": kind, "exit_code": code, "message": message})


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    args.argv = argv
    stage = None
    try:
        level = logging.getLevelName(str(args.log_level).upper())
        if not isinstance(level, int):
            raise ConfigError(f"unknown log level {args.log_level!r}")
        logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
        if not args.run_dir:
            raise ConfigError("--run-dir (or TARNN_RUN_DIR) is required")
        config = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
        config = config.with_overrides(_overrides(args.set))
        stage = Stage(args.command, args, config)
        COMMANDS[args.command](stage)
        return 0
    except TarnnError as exc:
        if stage:
            stage.abort()
        print(_error_line(exc.kind, exc.exit_code, str(exc)), file=sys.stderr)
        return exc.exit_code
    except Exception as exc:  # unexpected: still one parsable line, plus the traceback at debug level
        if stage:
            stage.abort()
        log.debug("unhandled error", exc_info=True)
        print(_error_line("internal", 1, f"{type(exc).__name__}: {exc}"), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
