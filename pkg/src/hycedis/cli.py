"""Command-line entry point: generate, train, eval, score.

Exit codes: 0 success, 2 usage or configuration error, 3 I/O failure,
4 numeric failure during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .baselines import KvHead, McDropout, SoftmaxClassifier, SoftmaxThreshold, TemperatureScaling, pooled_softmax_features
from .checkpoint import load_checkpoint, save_checkpoint
from .confidence import ConfidenceModel, predict_confidence, train_hycedis
from .config import RunConfig, load_run_config
from .corpus import SPLITS, Split, generate_corpus, load_dataset, load_split, save_corpus
from .errors import CheckpointError, ConfigError, DataError, HycedisError, ParseError, TrainingError, ValidationError
from .metrics import EvalReport
from .vcad import VcadModel

log = logging.getLogger("hycedis")

METHODS = ("hycedis", "mcp", "softmax-threshold", "softmax-classifier", "temp-scaling", "mc-dropout")
EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4


class UsageError(HycedisError):
    pass


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


def write_manifest(path: Path, command: str, config_hash: str, seed: int, started: str,
                   artifacts: list[str], metrics: dict) -> None:
    manifest = {
        "command": command,
        "config_hash": config_hash,
        "seed": seed,
        "started_at": started,
        "finished_at": _now(),
        "artifacts": artifacts,
        "metrics": metrics,
    }
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _run_config(args) -> RunConfig:
    return load_run_config(args.config, args.set)


def _seed(args, default: int) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("HYCEDIS_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"HYCEDIS_SEED must be an integer, got {env!r}") from None
    return default


# commands --------------------------------------------------------------------


def cmd_generate(args) -> int:
    started = _now()
    cfg = _run_config(args)
    corpus_cfg = replace(cfg.corpus, seed=_seed(args, cfg.corpus.seed)).validate()
    out = Path(args.out)
    splits = generate_corpus(corpus_cfg)
    paths = save_corpus(splits, out)
    metrics = {name: {"documents": len(s.documents), "records": len(s.records),
                      "positive_rate": float(s.labels.mean()) if s.records else 0.0}
               for name, s in splits.items()}
    write_manifest(out / "manifest.json", "generate", corpus_cfg.config_hash(), corpus_cfg.seed, started,
                   [str(p) for p in paths], metrics)
    print(f"wrote {len(paths)} splits to {out}", file=sys.stderr)
    return EXIT_OK


def _load_splits(data_dir, names) -> dict[str, Split]:
    data_dir = Path(data_dir)
    missing = [n for n in names if not (data_dir / f"{n}.jsonl").is_file()]
    if missing:
        raise UsageError(f"missing split file(s) in {data_dir}: {', '.join(missing)}")
    return load_dataset(data_dir, names)


def fit_vcad(train: Split, cfg: RunConfig, seed: int) -> VcadModel:
    feats = np.stack([d.doc_feature for d in train.documents])
    cats = [d.category for d in train.documents]
    if any(c is None for c in cats):
        raise DataError("training documents need layout categories to fit VCAD")
    vcad = VcadModel(feats.shape[1], cfg.vcad, seed)
    vcad.fit(feats, np.array(cats), seed)
    return vcad


def cmd_train(args) -> int:
    started = _now()
    cfg = _run_config(args)
    seed = _seed(args, cfg.model.seed)
    overrides = {"seed": seed}
    if args.fusion:
        overrides["fusion"] = args.fusion
    if args.no_vcad:
        overrides["use_vcad"] = False
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    mcfg = replace(cfg.model, **overrides).validate()
    splits = _load_splits(args.data, ("train", "val"))
    train, val = splits["train"], splits["val"]
    vcad = None
    if mcfg.use_vcad:
        if args.vcad:
            _, vcad, _ = load_checkpoint(args.vcad)
            if vcad is None:
                raise UsageError(f"{args.vcad} has no VCAD section")
        else:
            vcad = fit_vcad(train, cfg, seed)
    model, history = train_hycedis(train, val, vcad, mcfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    meta = {"alphabet": train.alphabet, "keys": list(train.keys), "shared_keys": list(train.shared_keys),
            "corpus_hash": train.config_hash}
    save_checkpoint(out, model, vcad, meta)
    metrics = {
        "final_train_bce": history["final_train_bce"],
        "final_val_bce": history.get("final_val_bce"),
        "best_epoch": history["best_epoch"],
        "epochs_run": history["epochs_run"],
    }
    if vcad is not None:
        metrics["vcad_digest"] = vcad.digest()
    manifest = out.with_name(out.name + ".manifest.json")
    write_manifest(manifest, "train", train.config_hash, seed, started, [str(out)], metrics)
    print(f"trained {mcfg.fusion} model (vcad={'on' if vcad else 'off'}); checkpoint {out}", file=sys.stderr)
    return EXIT_OK


def _model_scores(model: ConfidenceModel, vcad, records, alphabet) -> np.ndarray:
    return np.array([o.p_correct for o in predict_confidence(model, vcad, records, alphabet)])


def evaluate_methods(methods, checkpoints, splits: dict[str, Split], split_name: str,
                     cfg: RunConfig, seed: int) -> list[EvalReport]:
    """EvalReport for every requested method on identical records of ``split_name``."""
    train, val = splits["train"], splits["val"]
    target = splits[split_name]
    if split_name == "ood":
        target = target.restrict_keys(target.shared_keys or train.shared_keys)
    records = target.records
    if not records:
        raise DataError(f"split {split_name} has no records to evaluate")
    if any(r.label is None for r in records):
        raise DataError(f"split {split_name} has unlabeled records")
    labels = target.labels
    n_bins = cfg.eval["n_bins"]
    reports = []
    for method in methods:
        if method in ("hycedis", "mcp"):
            want_vcad = method == "hycedis"
            found = [c for c in checkpoints if (c[1] is not None) == want_vcad]
            if not found:
                kind = "with" if want_vcad else "without"
                raise UsageError(f"method {method} needs a checkpoint trained {kind} VCAD")
            model, vcad, _ = found[0]
            scores = _model_scores(model, vcad, records, train.alphabet)
        elif method == "softmax-threshold":
            scores = SoftmaxThreshold().fit(train.records).score(records)
        elif method == "temp-scaling":
            scores = TemperatureScaling().fit(val).score(records)
        elif method == "softmax-classifier":
            clf = SoftmaxClassifier(len(pooled_softmax_features(train.records[0])), seed=seed)
            clf.fit(train.records, epochs=cfg.eval["baseline_epochs"], seed=seed)
            scores = clf.score(records)
        elif method == "mc-dropout":
            head = KvHead(len(train.keys), seed=seed).fit(train, epochs=cfg.eval["baseline_epochs"], seed=seed)
            scores = McDropout(head, train.keys, cfg.eval["mc_passes"], seed).score(records)
        else:
            raise UsageError(f"unknown method {method!r}")
        reports.append(EvalReport.compute(method, split_name, scores, labels, n_bins))
    return reports


def _table(reports: list[EvalReport]) -> str:
    lines = [f"{'method':<20}{'AUC':>8}{'ECE':>8}{'n':>7}"]
    lines += [f"{r.method:<20}{100 * r.auc:>8.2f}{r.ece:>8.4f}{r.n_samples:>7d}" for r in reports]
    return "\n".join(lines)


def cmd_eval(args) -> int:
    started = _now()
    cfg = _run_config(args)
    seed = _seed(args, cfg.model.seed)
    methods = list(METHODS) if args.method == "all" else [args.method]
    needs_ckpt = any(m in ("hycedis", "mcp") for m in methods)
    checkpoints = [load_checkpoint(p) for p in (args.checkpoint or [])]
    if needs_ckpt and not checkpoints:
        raise UsageError("--checkpoint is required for hycedis/mcp")
    names = sorted({"train", "val", args.split}, key=SPLITS.index)
    splits = _load_splits(args.data, names)
    reports = evaluate_methods(methods, checkpoints, splits, args.split, cfg, seed)
    payload = {"split": args.split, "reports": [r.to_dict() for r in reports]}
    print(_dumps(payload))
    print(_table(reports), file=sys.stderr)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / f"report-{args.split}.json"
    csv_path = out / f"reliability-{args.split}.csv"
    report_path.write_text(_dumps(payload) + "\n", encoding="utf-8")
    csv_rows = [reports[0].reliability_csv()] + [r.reliability_csv().split("\n", 1)[1] for r in reports[1:]]
    csv_path.write_text("".join(csv_rows), encoding="utf-8")
    metrics = {r.method: {"auc": r.auc, "ece": r.ece} for r in reports}
    write_manifest(out / f"manifest-eval-{args.split}.json", "eval", splits["train"].config_hash, seed, started,
                   [str(report_path), str(csv_path)], metrics)
    return EXIT_OK


def cmd_score(args) -> int:
    model, vcad, meta = load_checkpoint(args.checkpoint)
    path = Path(args.records)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    split = load_split(path)
    alphabet = meta.get("alphabet", split.alphabet)
    if split.records and tuple(split.keys) != tuple(meta.get("keys", split.keys)):
        raise ValidationError("record key vocabulary differs from the checkpoint's", field="keys", line=1)
    lines = [
        _dumps({"record_id": o.field_ref, "p_correct": o.p_correct, "anomaly": o.anomaly})
        for o in predict_confidence(model, vcad, split.records, alphabet)
    ]
    text = "".join(line + "\n" for line in lines)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


# argument parsing ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hycedis", description="Confidence estimation for IE outputs.")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="key=value config file (defaults are built in)")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one setting; repeatable")

    g = sub.add_parser("generate", help="write the synthetic corpus")
    common(g)
    g.add_argument("--out", default="data")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train VCAD and the confidence model")
    common(t)
    t.add_argument("--data", default="data")
    t.add_argument("--out", default="checkpoints/hycedis.ckpt")
    t.add_argument("--fusion", choices=("concat", "bilinear"))
    t.add_argument("--no-vcad", action="store_true")
    t.add_argument("--vcad", help="reuse the VCAD stored in this checkpoint instead of training one")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="AUC/ECE report for one or all methods")
    common(e)
    e.add_argument("--checkpoint", action="append", help="repeatable; one with VCAD (hycedis), one without (mcp)")
    e.add_argument("--data", default="data")
    e.add_argument("--method", default="all", choices=METHODS + ("all",))
    e.add_argument("--split", default="test", choices=SPLITS)
    e.add_argument("--out", default="reports")
    e.add_argument("--seed", type=int)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("score", help="per-field confidence for a records file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--records", required=True)
    s.add_argument("--out")
    s.set_defaults(func=cmd_score)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, UsageError, DataError, ParseError, ValidationError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except HycedisError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
