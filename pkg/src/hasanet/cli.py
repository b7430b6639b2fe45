"""Command-line entry point: prepare, train, finetune, eval, transfer, report."""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import torch

from .errors import CapabilityError, HasaNetError, ValidationError
from .features import FeatureCache, default_layer_mode, make_provider
from .metrics import EvalReport, build_report
from .model import AssessmentSystem, HASANet, ModelConfig, TargetPair
from .store import PreparedData, Run, RunRecord, load_config, prepare_data, validate_config
from .training import (FULL, Checkpoint, Corpus, TrainConfig, TransferPlan, check_tunable, data_fingerprint,
                       evaluate, extract_features, finetune, load_waves, numeric_mode, train, transfer_protocol)
from .targets import ScoreProvider

log = logging.getLogger("hasanet")

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message, module="cli")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--seed", type=int, help="global seed")
    p.add_argument("--out", help="output directory")
    p.add_argument("--provider", help="feature provider: spectrogram, mock, mock_whisper, ssl_ll, ssl_ws, whisper")
    p.add_argument("--targets", help="synthetic[:seed] or imported:<scores.csv>")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="hasanet", description="Non-intrusive hearing-aid speech assessment toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare", parents=[common], help="build manifests, audio, pairings and scores")
    p.add_argument("--assets", help="asset root with clean/, noise/, rir/ (env HASANET_ASSET_ROOT)")
    p.add_argument("--recipe", choices=("in_domain", "ood"))
    p.add_argument("--demo", type=int, metavar="N", help="synthesise N clean utterances instead of reading assets")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", parents=[common], help="train on a prepared data directory")
    p.add_argument("--data", help="prepared data directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune encoder and head from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--mode", type=str.upper, choices=("PF", "EF", "TWO_STAGE"))
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint or a predictions file")
    p.add_argument("--data", help="prepared data directory")
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="CSV utterance_id,condition,audiogram_id,quality,intelligibility")
    p.add_argument("--role", default="test", choices=("train", "validation", "test"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("transfer", parents=[common], help="zero/few/full-shot ladder on out-of-domain data")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="prepared out-of-domain data directory")
    p.add_argument("--sizes", help="comma-separated sizes, e.g. 0,100,200,full")
    p.add_argument("--epochs", type=int)
    p.set_defaults(func=cmd_transfer)

    p = sub.add_parser("report", parents=[common], help="side-by-side comparison of finished runs")
    p.add_argument("runs", nargs="+", help="run directories (or run ids under --out)")
    p.set_defaults(func=cmd_report)
    return parser


def _config(args, command: str, **extra) -> tuple[dict, TrainConfig]:
    overrides = {"seed": args.seed, "out": args.out, "provider": args.provider, "targets": args.targets, **extra}
    cfg = load_config(args.config, overrides)
    return cfg, validate_config(cfg, command)


# --- helpers -------------------------------------------------------------------

def _provider(cfg, name: str | None = None, options: dict | None = None):
    name = name or cfg["provider"]
    opts = dict(cfg.get("provider_options") or {}) if options is None else dict(options)
    if name in ("mock", "mock_whisper"):
        opts.setdefault("seed", cfg["seed"])
    provider = make_provider(name, **opts)
    if isinstance(provider, torch.nn.Module):
        provider.eval()
    return provider, opts


def _corpus(data: PreparedData, cfg, provider=None, waves: bool = False) -> Corpus:
    manifest = data.manifest("all")
    table = data.scores(cfg["targets"] if str(cfg["targets"]).startswith("imported:") else None)
    stacks = None
    if provider is not None and not waves:
        stacks = extract_features(manifest, data.audio_root, provider, FeatureCache(data.root / "cache"))
    return Corpus(manifest, data.patterns, data.categories, ScoreProvider("imported", "table", table),
                  stacks=stacks, waves=load_waves(manifest, data.audio_root) if waves else None)


def _write_report(run: Run, report: EvalReport, stem: str) -> str:
    run.path(f"reports/{stem}.json").write_text(report.to_json())
    run.path(f"reports/{stem}.csv").write_text(report.to_csv())
    run.path(f"reports/{stem}.txt").write_text(report.to_text())
    return f"reports/{stem}.json"


def _headline(report: EvalReport) -> dict:
    return {t: {"mse": r.overall.mse, "lcc": r.overall.lcc, "srcc": r.overall.srcc} for t, r in report.tasks.items()}


def _load_checkpoint(path) -> Checkpoint:
    p = Path(path)
    if (p / "checkpoint").is_dir():
        p = p / "checkpoint"
    return Checkpoint.load(p)


# --- commands ------------------------------------------------------------------

def cmd_prepare(args) -> int:
    cfg, _ = _config(args, "prepare", **{"data.assets": args.assets, "data.recipe": args.recipe, "data.demo": args.demo})
    out = Path(cfg["out"])
    prepare_data(cfg, out)
    info = json.loads((out / "prepare.json").read_text())
    print(json.dumps(info["counts"], indent=2))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg, tcfg = _config(args, "train", **{"data.dir": args.data, "train.max_epochs": args.epochs,
                                          "train.batch_size": args.batch_size})
    data = PreparedData.load(cfg["data"]["dir"])
    provider, opts = _provider(cfg)
    corpus = _corpus(data, cfg, provider)
    train_ex, val_ex, test_ex = (corpus.examples(data.pairing(r)) for r in ("train", "validation", "test"))
    mcfg = ModelConfig(provider.dim, provider.n_layers, default_layer_mode(cfg["provider"]), **cfg["model"])
    run = Run(cfg["out"], "train", cfg)
    system = AssessmentSystem(HASANet(mcfg, tcfg.seed))
    result, tlog = train(system, train_ex, val_ex, tcfg)
    tlog.save(run.path("logs/train.csv"))
    Checkpoint.capture(system, provider.provider_id, "train", tcfg.seed, data_fingerprint(train_ex),
                       provider_name=cfg["provider"], provider_options=opts).save(run.path("checkpoint/x").parent)
    with numeric_mode(tcfg.threads):
        report = evaluate(system, test_ex, corpus.categories, meta={"role": "test", "run": run.run_id})
    rel = _write_report(run, report, "test")
    run.finalize(report=rel, best_epoch=result.best_epoch, epochs_run=result.epochs_run,
                 label=f"{cfg['provider']}", metrics=_headline(report))
    print(report.to_text())
    print(f"run: {run.dir}")
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg, tcfg = _config(args, "finetune", **{"data.dir": args.data, "train.finetune_mode": args.mode,
                                             "train.max_epochs": args.epochs})
    ck = _load_checkpoint(args.checkpoint)
    name = args.provider or ck.extra.get("provider_name", cfg["provider"])
    provider, opts = _provider(cfg, name, None if args.provider else ck.extra.get("provider_options"))
    check_tunable(provider, tcfg.finetune_mode)
    data = PreparedData.load(cfg["data"]["dir"])
    corpus = _corpus(data, cfg, waves=True)
    train_ex, val_ex, test_ex = (corpus.examples(data.pairing(r)) for r in ("train", "validation", "test"))
    run = Run(cfg["out"], "finetune", cfg)
    system = ck.build(provider)
    result = finetune(system, tcfg.finetune_mode, train_ex, val_ex, tcfg)
    result.log.save(run.path("logs/finetune.csv"))
    run.path("finetune.json").write_text(json.dumps({
        "mode": result.mode, "stages": result.stages, "frozen_groups": list(result.frozen_groups),
        "hashes_before": result.hashes_before, "hashes_after": result.hashes_after,
        "update_counts": result.update_counts, "frozen_unchanged": result.frozen_unchanged(),
    }, indent=2) + "\n")
    Checkpoint.capture(system, provider.provider_id, f"finetune-{tcfg.finetune_mode}", tcfg.seed,
                       data_fingerprint(train_ex), provider_name=name, provider_options=opts
                       ).save(run.path("checkpoint/x").parent)
    report = evaluate(system, test_ex, corpus.categories, use_waves=True, meta={"role": "test", "run": run.run_id})
    rel = _write_report(run, report, "test")
    run.finalize(report=rel, label=f"{name}-{tcfg.finetune_mode}", metrics=_headline(report),
                 stage_lrs=result.stage_lrs)
    print(report.to_text())
    print(f"run: {run.dir}")
    return EXIT_OK


def _read_predictions(path) -> dict:
    out = {}
    with open(path, newline="") as fh:
        for line, row in enumerate(csv.DictReader(fh), start=2):
            try:
                key = (row["utterance_id"], row["condition"], row["audiogram_id"])
                out[key] = (float(row["quality"]), float(row["intelligibility"]))
            except (KeyError, TypeError, ValueError):
                raise ValidationError(f"{path} line {line}: expected utterance_id,condition,audiogram_id,"
                                      "quality,intelligibility", module="cli") from None
    return out


def cmd_eval(args) -> int:
    cfg, tcfg = _config(args, "eval", **{"data.dir": args.data})
    if bool(args.checkpoint) == bool(args.predictions):
        raise ValidationError("eval needs exactly one of --checkpoint or --predictions", module="cli")
    if not cfg["data"]["dir"]:
        raise ValidationError("eval needs --data DIR", module="cli")
    data = PreparedData.load(cfg["data"]["dir"])
    pairing = data.pairing(args.role)
    if args.predictions:
        preds = _read_predictions(args.predictions)
        table = data.scores(cfg["targets"] if str(cfg["targets"]).startswith("imported:") else None)
        targets = {k: table[k] for k in preds if k in table}
        missing = [k for k in preds if k not in table]
        if missing:
            raise ValidationError(f"{len(missing)} prediction key(s) have no target, e.g. {missing[0]}", module="metrics")
        run = Run(cfg["out"], "eval", cfg)
        report = build_report(preds, targets, data.categories, {"role": args.role, "run": run.run_id})
        label = Path(args.predictions).stem
    else:
        ck = _load_checkpoint(args.checkpoint)
        name = args.provider or ck.extra.get("provider_name", cfg["provider"])
        provider, _ = _provider(cfg, name, None if args.provider else ck.extra.get("provider_options"))
        tuned = any(k.startswith("encoder.") for k in ck.state)
        corpus = _corpus(data, cfg, provider, waves=tuned)
        system = ck.build(provider if tuned else None)
        run = Run(cfg["out"], "eval", cfg)
        with numeric_mode(tcfg.threads):
            report = evaluate(system, corpus.examples(pairing), corpus.categories, use_waves=tuned,
                              meta={"role": args.role, "run": run.run_id})
        label = f"{name}-{ck.stage}"
    rel = _write_report(run, report, args.role)
    run.finalize(report=rel, label=label, metrics=_headline(report))
    print(report.to_text())
    print(f"run: {run.dir}")
    return EXIT_OK


def cmd_transfer(args) -> int:
    extra = {"data.dir": args.data, "train.max_epochs": args.epochs}
    if args.sizes:
        extra["transfer.sizes"] = [s.strip() for s in args.sizes.split(",") if s.strip()]
    cfg, tcfg = _config(args, "transfer", **extra)
    plan = TransferPlan(tuple(cfg["transfer"]["sizes"]))
    ck = _load_checkpoint(args.checkpoint)
    if any(k.startswith("encoder.") for k in ck.state):
        raise CapabilityError("transfer runs on frozen features; use a checkpoint from `hasanet train`", module="cli")
    name = args.provider or ck.extra.get("provider_name", cfg["provider"])
    provider, _ = _provider(cfg, name, None if args.provider else ck.extra.get("provider_options"))
    data = PreparedData.load(cfg["data"]["dir"])
    corpus = _corpus(data, cfg, provider)
    train_ex, val_ex, test_ex = (corpus.examples(data.pairing(r)) for r in ("train", "validation", "test"))
    for s in plan.sizes:
        if s != FULL and s > len(train_ex):
            raise ValidationError(f"transfer size {s} exceeds the {len(train_ex)} available OOD combos",
                                  module="training", hint="prepare more OOD utterances or pass --sizes")
    run = Run(cfg["out"], "transfer", cfg)
    system = ck.build()
    outcomes = transfer_protocol(system, train_ex, val_ex, test_ex, plan, tcfg, corpus.categories)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["size", "n_train", "epochs", "val_loss_total", "val_loss_q", "val_loss_i",
                "quality_lcc", "intelligibility_lcc"])
    for o in outcomes:
        _write_report(run, o.report, f"transfer/size_{o.size}")
        w.writerow([o.size, o.n_train, o.epochs, repr(o.validation.total), repr(o.validation.quality),
                    repr(o.validation.intelligibility), o.report.tasks["quality"].overall.lcc,
                    o.report.tasks["intelligibility"].overall.lcc])
    run.path("transfer.csv").write_text(buf.getvalue())
    last = outcomes[-1]
    run.finalize(report=f"reports/transfer/size_{last.size}.json", label=f"{name}-transfer",
                 sizes=[o.size for o in outcomes], metrics=_headline(last.report))
    print(buf.getvalue(), end="")
    print(f"run: {run.dir}")
    return EXIT_OK


def _resolve_run(ref: str, out: str) -> Path:
    p = Path(ref)
    if (p / "run.json").exists():
        return p
    q = Path(out) / ref
    if (q / "run.json").exists():
        return q
    raise ValidationError(f"no run directory found for {ref!r}", module="store")


def cmd_report(args) -> int:
    cfg, _ = _config(args, "report")
    dirs = sorted({_resolve_run(r, cfg["out"]).resolve() for r in args.runs})
    rows = []
    for d in dirs:
        rec = RunRecord.load(d)
        if not rec.finished or "report" not in rec.summary:
            print(f"warning: skipping unfinished run {rec.run_id}", file=sys.stderr)
            continue
        report = EvalReport.from_dict(json.loads((d / rec.summary["report"]).read_text()))
        rows.append((rec.run_id, rec.summary.get("label", rec.command), report))
    if not rows:
        raise ValidationError("no finished runs to report", module="cli")
    header = ["run", "model"] + [f"{t}_{m}" for t in ("quality", "intelligibility") for m in ("mse", "lcc", "srcc")]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    text = [f"{'model':<28}{'quality':^27}{'intelligibility':^27}",
            f"{'':<28}" + f"{'MSE':>9}{'LCC':>9}{'SRCC':>9}" * 2]
    for run_id, label, report in rows:
        cells = [report.tasks[t].overall.get(m) for t in ("quality", "intelligibility") for m in ("mse", "lcc", "srcc")]
        w.writerow([run_id, label, *("n/a" if c is None else f"{c:.6f}" for c in cells)])
        text.append(f"{label[:27]:<28}" + "".join(f"{'n/a' if c is None else f'{c:.3f}':>9}" for c in cells))
    run = Run(cfg["out"], "report", cfg)
    run.path("comparison.csv").write_text(buf.getvalue())
    run.path("comparison.txt").write_text("\n".join(text) + "\n")
    run.finalize(runs=[r[0] for r in rows])
    print("\n".join(text))
    print(f"run: {run.dir}")
    return EXIT_OK


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return args.func(args)
    except (ValidationError, CapabilityError) as e:
        print(f"error [{e.module}]: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except HasaNetError as e:
        print(f"error [{e.module}]: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, RuntimeError, KeyError) as e:
        print(f"error [runtime]: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
