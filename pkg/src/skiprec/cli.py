"""Command-line interface.

    python -m skiprec ingest   LOG --out DIR [--schema raw-log --gap-minutes 20 ...]
    python -m skiprec synth    --out DIR [--catalog-size 500 --sessions 2000 ...]
    python -m skiprec train    --dataset DIR --out DIR [--model sasrec --beta 0.5 ...]
    python -m skiprec baseline --dataset DIR --out DIR [--algorithm bpr --variant nr ...]
    python -m skiprec eval     --checkpoint FILE --dataset DIR --out DIR
    python -m skiprec compare  A.json B.json [--out FILE]
    python -m skiprec report   NAME=FILE ... --baseline NAME [--out FILE]

Settings resolve as defaults, then a flat JSON ``--config`` file, then flags.
Every command that produces files writes them into a staging directory that is
renamed into place only on success, together with ``run_manifest.json``
holding the resolved settings and the hashes of all inputs.

Exit codes: 0 success, 2 configuration or input error, 3 integrity error,
4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile

from . import __version__, baselines, evaluation, synthetic
from .models import Checkpoint, CheckpointError, ModelConfig, resolve_architecture
from .objective import NLL_TARGETS, SCOPES, LossConfig, NumericError
from .session_data import (
    SCHEMAS,
    ConfigError,
    Dataset,
    DataError,
    IntegrityError,
    ParseError,
    ingest,
)
from .training import TrainConfig, train

log = logging.getLogger("skiprec")

EXIT_OK, EXIT_CONFIG, EXIT_INTEGRITY, EXIT_NUMERIC = 0, 2, 3, 4


class CLIError(Exception):
    def __init__(self, message: str, code: int = EXIT_CONFIG):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# settings

DEFAULTS = {
    "ingest": {
        "schema": "raw-log", "gap_minutes": 20.0, "skip_seconds": 30.0, "min_events": 5,
        "max_len": 20, "skip_session_fraction": None, "seed": 0,
    },
    "synth": {
        "catalog_size": 500, "latent_dim": 4, "sessions": 2000, "min_length": 5,
        "max_length": 20, "skip_threshold": 0.7, "coherence": 0.6, "temperature": 0.1,
        "seed": 0,
    },
    "train": {
        "model": "sasrec", "embed_dim": 32, "max_len": 20, "blocks": 2, "heads": 8,
        "mask_prob": None, "alpha": 1.0, "beta": 0.5, "neg_samples": 1000,
        "nce_scope": SCOPES[0], "nll_target": NLL_TARGETS[0], "lr": 0.005, "epochs": 30,
        "batch_size": 128, "patience": 5, "seed": 0,
    },
    "baseline": {
        "algorithm": "wrmf", "variant": "orig", "factors": 32, "reg": 0.01, "weight": 40.0,
        "iterations": None, "epochs": None, "lr": None, "nr_ratio": None, "seed": 0,
    },
    "eval": {"split": "test", "seed": 0},
}


def resolve_settings(command: str, args: argparse.Namespace) -> dict:
    """defaults <- config file <- explicitly given flags."""
    settings = dict(DEFAULTS[command])
    if getattr(args, "config", None):
        try:
            with open(args.config, encoding="utf-8") as f:
                loaded = json.load(f)
        except FileNotFoundError:
            raise CLIError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as exc:
            raise CLIError(f"config file {args.config} is not valid JSON: {exc}") from None
        if not isinstance(loaded, dict):
            raise CLIError("config file must hold a flat JSON object")
        unknown = sorted(set(loaded) - set(settings))
        if unknown:
            raise CLIError(f"unknown config keys for {command}: {', '.join(unknown)}")
        for key, value in loaded.items():
            if isinstance(value, (dict, list)):
                raise CLIError(f"config key {key!r} must be a scalar (flat JSON)")
        settings.update(loaded)
    for key in settings:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    return settings


def _conflict(a: str, b: str, why: str):
    raise CLIError(f"conflicting settings {a!r} and {b!r}: {why}")


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Staging:
    """Collects outputs in a temporary sibling directory and moves them into
    ``target`` only when the command succeeds."""

    def __init__(self, target: str):
        self.target = os.path.abspath(target)
        if os.path.exists(self.target) and os.listdir(self.target):
            raise CLIError(f"output directory {target} exists and is not empty")
        parent = os.path.dirname(self.target)
        os.makedirs(parent, exist_ok=True)
        self.path = tempfile.mkdtemp(prefix=".staging-", dir=parent)

    def file(self, name: str) -> str:
        return os.path.join(self.path, name)

    def commit(self):
        if os.path.isdir(self.target):
            os.rmdir(self.target)
        os.replace(self.path, self.target)

    def discard(self):
        shutil.rmtree(self.path, ignore_errors=True)


def write_json(path: str, record: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")


def run_manifest(command: str, settings: dict, inputs: dict, outputs: dict | None = None) -> dict:
    return {"command": command, "version": __version__, "settings": settings,
            "inputs": inputs, "outputs": outputs or {}}


def _load_dataset(path: str) -> Dataset:
    if not os.path.isdir(path):
        raise CLIError(f"dataset directory not found: {path}")
    return Dataset.load(path)


def _load_checkpoint(path: str) -> Checkpoint:
    if not os.path.isfile(path):
        raise CLIError(f"checkpoint not found: {path}")
    return Checkpoint.load(path)


def _dataset_inputs(path: str) -> dict:
    return {name: file_sha256(os.path.join(path, name))
            for name in ("sessions.txt", "vocab.txt") if os.path.exists(os.path.join(path, name))}


# ---------------------------------------------------------------------------
# commands


def cmd_ingest(args) -> int:
    s = resolve_settings("ingest", args)
    if s["schema"] not in SCHEMAS:
        raise CLIError(f"schema must be one of {SCHEMAS}")
    if s["min_events"] > s["max_len"]:
        _conflict("min_events", "max_len", "every chunk would be shorter than the minimum")
    if not os.path.isfile(args.input):
        raise CLIError(f"input file not found: {args.input}")
    with open(args.input, "rb") as f:
        data = f.read()
    dataset = ingest(data, s["schema"], gap_seconds=s["gap_minutes"] * 60,
                     skip_seconds=s["skip_seconds"], min_events=s["min_events"],
                     max_len=s["max_len"], skip_session_fraction=s["skip_session_fraction"],
                     seed=s["seed"])
    if not dataset.sessions:
        raise CLIError("no session survives the filtering rules")
    stage = Staging(args.out)
    try:
        dataset.save(stage.path)
        manifest = dataset.manifest()
        manifest["settings"] = {**manifest["settings"], **s}
        write_json(stage.file("manifest.json"), manifest)
        write_json(stage.file("run_manifest.json"),
                   run_manifest("ingest", s, {"log": file_sha256(args.input)},
                                {"dataset_hash": dataset.digest()}))
        stage.commit()
    except BaseException:
        stage.discard()
        raise
    print(f"{len(dataset.sessions)} sessions, {dataset.vocab.num_items} items, "
          f"skip rate {dataset.skip_rate:.3f} -> {args.out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    s = resolve_settings("synth", args)
    config = synthetic.SyntheticConfig(
        catalog_size=s["catalog_size"], latent_dim=s["latent_dim"], sessions=s["sessions"],
        session_length_range=(s["min_length"], s["max_length"]),
        skip_threshold=s["skip_threshold"], coherence=s["coherence"],
        temperature=s["temperature"], seed=s["seed"])
    dataset, truth = synthetic.make_dataset(config)
    stage = Staging(args.out)
    try:
        synthetic.save_synthetic(dataset, truth, stage.path)
        write_json(stage.file("run_manifest.json"),
                   run_manifest("synth", s, {}, {"dataset_hash": dataset.digest(),
                                                 "skip_rate": dataset.skip_rate}))
        stage.commit()
    except BaseException:
        stage.discard()
        raise
    print(f"{len(dataset.sessions)} sessions, skip rate {dataset.skip_rate:.3f} -> {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    s = resolve_settings("train", args)
    try:
        arch = resolve_architecture(s["model"])
    except ValueError as exc:
        raise CLIError(str(exc)) from None
    model_kw = {"embed_dim": s["embed_dim"], "max_len": s["max_len"], "blocks": s["blocks"],
                "heads": s["heads"]}
    if s["mask_prob"] is not None:
        if arch != "bidirectional-attention":
            _conflict("mask_prob", "model", f"masking only applies to bert4rec, not {s['model']}")
        model_kw["mask_prob"] = s["mask_prob"]
    if s["alpha"] == 0 and s["beta"] == 0:
        _conflict("alpha", "beta", "both loss weights are zero")
    try:
        loss_config = LossConfig(alpha=s["alpha"], beta=s["beta"], num_negatives=s["neg_samples"],
                                 nce_negative_scope=s["nce_scope"], nll_target=s["nll_target"])
        train_config = TrainConfig(learning_rate=s["lr"], epochs=s["epochs"],
                                   batch_size=s["batch_size"], seed=s["seed"],
                                   patience=s["patience"])
        dataset = _load_dataset(args.dataset)
        model_config = ModelConfig(arch, vocab_size=len(dataset.vocab), **model_kw)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, DataError):
            raise
        raise CLIError(str(exc)) from None
    stage = Staging(args.out)
    try:
        result = train(dataset, model_config, loss_config, train_config,
                       progress=lambda r: log.info("epoch %d combined %.4f val_hr10 %.4f",
                                                   r["epoch"], r["combined"], r["val_hr10"]))
        result.checkpoint.save(stage.file("model.ckpt"))
        with open(stage.file("train_log.ndjson"), "w", encoding="utf-8") as f:
            f.write(result.log_lines())
        outputs = {"best_epoch": result.best_epoch, "aborted": result.aborted,
                   "checkpoint": file_sha256(stage.file("model.ckpt"))}
        write_json(stage.file("run_manifest.json"),
                   run_manifest("train", s, {"dataset_hash": dataset.digest(),
                                             **_dataset_inputs(args.dataset)}, outputs))
        stage.commit()
    except BaseException:
        stage.discard()
        raise
    if result.aborted:
        print(f"training aborted: {result.aborted}; last good checkpoint kept in {args.out}",
              file=sys.stderr)
        return EXIT_NUMERIC
    print(f"best epoch {result.best_epoch} -> {args.out}")
    return EXIT_OK


def cmd_baseline(args) -> int:
    s = resolve_settings("baseline", args)
    algo, variant = s["algorithm"], s["variant"]
    if algo not in ("wrmf", "bpr"):
        raise CLIError("algorithm must be wrmf or bpr")
    if variant not in baselines.VARIANTS:
        raise CLIError(f"variant must be one of {baselines.VARIANTS}")
    if s["nr_ratio"] is not None and variant != "nr":
        _conflict("nr_ratio", "variant", "the skip ratio only applies to the nr variant")
    if algo == "wrmf":
        if s["epochs"] is not None:
            _conflict("epochs", "algorithm", "wrmf runs ALS iterations, not SGD epochs")
        if s["lr"] is not None:
            _conflict("lr", "algorithm", "wrmf has no learning rate")
        kw = {"factors": s["factors"], "weight": s["weight"], "reg": s["reg"],
              "iterations": s["iterations"] if s["iterations"] is not None else 15}
    else:
        if s["iterations"] is not None:
            _conflict("iterations", "algorithm", "bpr runs SGD epochs, not ALS iterations")
        kw = {"factors": s["factors"], "reg": s["reg"],
              "lr": s["lr"] if s["lr"] is not None else 0.05,
              "epochs": s["epochs"] if s["epochs"] is not None else 20}
    kw["variant"] = variant
    if s["nr_ratio"] is not None:
        kw["nr_ratio"] = s["nr_ratio"]
    kw["seed"] = s["seed"]
    dataset = _load_dataset(args.dataset)
    splits = dataset.splits()
    stage = Staging(args.out)
    try:
        params = baselines.train_baseline(algo, splits, len(dataset.vocab), **kw)
        ckpt = baselines.to_checkpoint(params, {"algorithm": algo, **kw},
                                       dataset.vocab.digest(),
                                       {"dataset_hash": dataset.digest()})
        ckpt.save(stage.file("model.ckpt"))
        write_json(stage.file("run_manifest.json"),
                   run_manifest("baseline", s, {"dataset_hash": dataset.digest(),
                                                **_dataset_inputs(args.dataset)},
                                {"checkpoint": file_sha256(stage.file("model.ckpt"))}))
        stage.commit()
    except BaseException:
        stage.discard()
        raise
    print(f"{algo}-{variant} -> {args.out}")
    return EXIT_OK


def _model_name(ckpt: Checkpoint) -> str:
    if ckpt.kind == "baseline":
        return f"{ckpt.config['algorithm']}-{ckpt.config['variant']}"
    arch = ckpt.config["model"]["architecture"]
    return f"{arch}(beta={ckpt.config['loss']['beta']})"


def cmd_eval(args) -> int:
    s = resolve_settings("eval", args)
    if s["split"] not in ("test", "validation"):
        raise CLIError("split must be test or validation")
    ckpt = _load_checkpoint(args.checkpoint)
    dataset = _load_dataset(args.dataset)
    report = evaluation.evaluate(ckpt, dataset, s["split"])
    record = report.to_json(_model_name(ckpt), dataset.digest(), s["seed"])
    stage = Staging(args.out)
    try:
        evaluation.dump_metrics(record, stage.file("metrics.json"))
        write_json(stage.file("run_manifest.json"),
                   run_manifest("eval", s, {"checkpoint": file_sha256(args.checkpoint),
                                            "dataset_hash": dataset.digest()}))
        stage.commit()
    except BaseException:
        stage.discard()
        raise
    print(json.dumps(record, sort_keys=True))
    return EXIT_OK


def _read_metrics(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise CLIError(f"metrics file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CLIError(f"metrics file {path} is not valid JSON: {exc}") from None


def _write_text_atomic(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".partial-")
    with os.fdopen(fd, "w", encoding="utf-8") as f:
        f.write(text)
    os.replace(tmp, path)


def cmd_compare(args) -> int:
    a, b = _read_metrics(args.a), _read_metrics(args.b)
    cmp = evaluation.compare_metrics(a, b)
    text = evaluation.render_comparison(cmp, a.get("model", "A"), b.get("model", "B"))
    print(text)
    if args.out:
        _write_text_atomic(args.out, json.dumps(cmp, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_report(args) -> int:
    rows = {}
    for entry in args.runs:
        name, sep, path = entry.partition("=")
        if not sep:
            raise CLIError(f"expected NAME=FILE, got {entry!r}")
        rows[name] = _read_metrics(path)
    baseline = args.baseline or next(iter(rows))
    if baseline not in rows:
        raise CLIError(f"baseline {baseline!r} is not among the runs")
    hashes = {r.get("dataset_hash") for r in rows.values()}
    if len(hashes) > 1:
        raise evaluation.VocabularyMismatch("metric files refer to different datasets")
    text = evaluation.render_table(rows, baseline)
    print(text)
    if args.out:
        _write_text_atomic(args.out, text + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skiprec", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True):
        p.add_argument("--config", help="flat JSON file of settings (flags take precedence)")
        if seed:
            p.add_argument("--seed", type=int)

    p = sub.add_parser("ingest", help="turn a listening log into a dataset")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--schema", choices=SCHEMAS)
    p.add_argument("--gap-minutes", type=float)
    p.add_argument("--skip-seconds", type=float)
    p.add_argument("--min-events", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--skip-session-fraction", type=float)
    common(p)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic dataset with planted preferences")
    p.add_argument("--out", required=True)
    p.add_argument("--catalog-size", type=int)
    p.add_argument("--latent-dim", type=int)
    p.add_argument("--sessions", type=int)
    p.add_argument("--min-length", type=int)
    p.add_argument("--max-length", type=int)
    p.add_argument("--skip-threshold", type=float)
    p.add_argument("--coherence", type=float)
    p.add_argument("--temperature", type=float)
    common(p)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a sequence encoder")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--model", help="gru4rec, caser, sasrec or bert4rec")
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--blocks", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--mask-prob", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--neg-samples", type=int)
    p.add_argument("--nce-scope", choices=SCOPES)
    p.add_argument("--nll-target", choices=NLL_TARGETS)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("baseline", help="train a WRMF or BPR baseline")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--algorithm", choices=("wrmf", "bpr"))
    p.add_argument("--variant", choices=baselines.VARIANTS)
    p.add_argument("--factors", type=int)
    p.add_argument("--reg", type=float)
    p.add_argument("--weight", type=float)
    p.add_argument("--iterations", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--nr-ratio", type=float)
    common(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", help="rank held-out targets and write metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("test", "validation"))
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("compare", help="relative deltas of metrics B over metrics A")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--out")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("report", help="table of several metric files")
    p.add_argument("runs", nargs="+", metavar="NAME=FILE")
    p.add_argument("--baseline")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (IntegrityError, CheckpointError, evaluation.VocabularyMismatch) as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except ParseError as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, DataError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
