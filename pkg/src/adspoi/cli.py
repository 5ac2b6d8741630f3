"""Command line entry point: ``adspoi <command> ...``.

Exit codes: 0 success, 1 check failed (gradcheck), 2 invalid config or
usage, 3 checkpoint/config hash mismatch, 4 unreadable input.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from pathlib import Path

import yaml

from . import config as config_mod
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, apply_variant
from .container import ContainerError
from .ingest import (PARSERS, InputError, dataset_fingerprint, load_dataset, preprocess,
                     save_dataset, split_leave_one_out)

log = logging.getLogger("adspoi")

EXIT_FAIL, EXIT_CONFIG, EXIT_HASH, EXIT_INPUT = 1, 2, 3, 4


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _load_config(args) -> RunConfig:
    cfg = config_mod.load(args.config)
    if getattr(args, "deterministic", False):
        cfg = cfg.replace(deterministic=True)
    return cfg


def load_split(cfg: RunConfig):
    """Dataset split and fingerprint for the config's data section."""
    d = cfg.data
    if not d.path:
        raise ConfigError("data.path: required for this command")
    if d.format == "dataset":
        checkins, _ = load_dataset(d.path)
    else:
        parsed = PARSERS[d.format](d.path)
        checkins = preprocess(parsed.checkins, d.min_user, d.min_poi)
    return split_leave_one_out(checkins), dataset_fingerprint(d.path)


def history_csv(history: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_mrr"])
    for row in history:
        w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_mrr"])])
    return buf.getvalue()


# --------------------------------------------------------------------------
# commands


def cmd_preprocess(args) -> int:
    parsed = PARSERS[args.format](args.input)
    raw = parsed.checkins
    lines = len(raw) + parsed.skipped
    if lines and parsed.skipped > lines / 2:
        log.warning("%d of %d lines failed to parse as %s; is --format right?", parsed.skipped, lines, args.format)
    clean = preprocess(raw, args.min_user, args.min_poi)
    meta = {"source_format": args.format, "min_user": args.min_user, "min_poi": args.min_poi,
            "name": args.name or Path(args.input).stem}
    save_dataset(args.out, clean, meta)
    summary = {
        "skipped_lines": parsed.skipped,
        "checkins_before": len(raw), "checkins_after": len(clean),
        "users_before": len({c.user_id for c in raw}), "users_after": len({c.user_id for c in clean}),
        "pois_before": len({c.poi_id for c in raw}), "pois_after": len({c.poi_id for c in clean}),
    }
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_synth(args) -> int:
    from .synth import SynthConfig, synth_generate, two_regime_config

    if args.config:
        with open(args.config) as fh:
            raw = yaml.safe_load(fh) or {}
        scfg = SynthConfig.from_dict(raw.get("synth", raw))
    else:
        scfg = two_regime_config()
    checkins = synth_generate(scfg, args.seed)
    if args.min_user > 1 or args.min_poi > 1:
        checkins = preprocess(checkins, args.min_user, args.min_poi)
    save_dataset(args.out, checkins, {"source_format": "synth", "seed": args.seed, "name": "synth"})
    print(json.dumps({"checkins": len(checkins), "users": len({c.user_id for c in checkins}),
                      "pois": len({c.poi_id for c in checkins})}, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    from .training import train

    cfg = _load_config(args)
    seed = args.seed if args.seed is not None else cfg.seeds[0]
    split, _ = load_split(cfg)
    resume = load_checkpoint(args.resume, cfg) if args.resume else None
    if resume is not None:
        seed = resume.seed
        if args.epochs:
            cfg_epochs = resume.state.epoch + args.epochs
            log.info("resuming at epoch %d, continuing to %d", resume.state.epoch, cfg_epochs)
    if args.epochs:
        total = args.epochs + (resume.state.epoch if resume else 0)
        cfg = cfg.replace(optim={"epochs": total})
        if resume is not None:
            resume.config = cfg
    ckpt = train(split, cfg, seed, resume=resume)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "checkpoint.ckpt", ckpt)
    _write(out / "history.csv", history_csv(ckpt.history))
    print(json.dumps({"epochs": ckpt.state.epoch, "best_val_mrr": ckpt.state.best_mrr,
                      "checkpoint": str(out / "checkpoint.ckpt")}, sort_keys=True))
    return 0


def _emit_report(report, out: Path, stem: str = "report") -> None:
    _write(out / f"{stem}.json", report.to_json())
    _write(out / f"{stem}.csv", report.to_csv())


def cmd_eval(args) -> int:
    from .evaluation import evaluate

    cfg = _load_config(args) if args.config else None
    ckpt = load_checkpoint(args.checkpoint, cfg)
    cfg = ckpt.config if cfg is None else cfg
    split, fp = load_split(cfg)
    if len(split.catalog) != ckpt.n_pois:
        raise CheckpointError(f"dataset has {len(split.catalog)} POIs, checkpoint expects {ckpt.n_pois}")
    report = evaluate(ckpt.params, split, cfg, args.split, seed=ckpt.seed, fingerprint=fp)
    _emit_report(report, Path(args.out))
    print(json.dumps({k: v["mean"] for k, v in report.metrics.items()}, sort_keys=True))
    return 0


def _seeds(args, cfg: RunConfig) -> list[int]:
    if args.seeds:
        return [int(s) for s in args.seeds.split(",")]
    if getattr(args, "seed", None) is not None:
        return [args.seed]
    return cfg.seeds


def cmd_ablate(args) -> int:
    from .evaluation import multi_seed

    cfg = _load_config(args)
    variants = config_mod.VARIANTS if args.variant == "all" else [args.variant]
    for v in variants:
        if v not in config_mod.VARIANTS:
            raise ConfigError(f"--variant: unknown variant {v!r}; choose from {config_mod.VARIANTS}")
    split, fp = load_split(cfg)
    out = Path(args.out)
    summary = {}
    for v in variants:
        vcfg = apply_variant(cfg, v)
        report = multi_seed(split, vcfg, _seeds(args, cfg), fingerprint=fp)
        _emit_report(report, out, f"report_{v}")
        summary[v] = report.mean("MRR")
    print(json.dumps({"MRR": summary}, sort_keys=True))
    return 0


def sweep_configs(cfg: RunConfig, axis: str, values: list[int]) -> list[tuple[int, RunConfig]]:
    """K sweep keeps d_s fixed (d grows with K); d sweep runs K = 1 with d_s = d."""
    out = []
    for v in values:
        if axis == "K":
            out.append((v, cfg.replace(model={"K": v})))
        elif axis == "d":
            out.append((v, cfg.replace(model={"K": 1, "d_s": v})))
        else:
            raise ConfigError(f"--axis: must be 'K' or 'd', got {axis!r}")
    return out


SWEEP_COLUMNS = ["dataset", "axis", "value", "K", "d_s", "d", "HR@10", "NDCG@10", "MRR"]


def cmd_sweep(args) -> int:
    from .evaluation import multi_seed

    cfg = _load_config(args)
    values = [int(v) for v in args.values.split(",")]
    runs = sweep_configs(cfg, args.axis, values)
    split, fp = load_split(cfg)
    out = Path(args.out)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for v, vcfg in runs:
        report = multi_seed(split, vcfg, _seeds(args, cfg), fingerprint=fp)
        _emit_report(report, out, f"report_{args.axis}{v}")
        m = vcfg.model
        w.writerow([cfg.data.name, args.axis, v, m.K, m.d_s, m.d]
                   + [repr(report.mean(k)) for k in ("HR@10", "NDCG@10", "MRR")])
    _write(out / f"sweep_{args.axis}.csv", buf.getvalue())
    print(buf.getvalue(), end="")
    return 0


def cmd_gradcheck(args) -> int:
    from .training import grad_check, thread_limit

    cfg = _load_config(args)
    with thread_limit(cfg):
        rep = grad_check(cfg, seed=args.seed or 0, fd_step=args.fd_step, n_pois=args.n_pois)
    print(json.dumps({"max_rel_error": rep.max_rel_error, "worst_block": rep.worst_block,
                      "worst_index": rep.worst_index, "n_checked": rep.n_checked,
                      "n_params": rep.n_params, "per_block": rep.per_block}, sort_keys=True))
    return 0 if rep.max_rel_error <= args.tolerance else EXIT_FAIL


def cmd_bench(args) -> int:
    from .evaluation import bench

    ckpt = load_checkpoint(args.checkpoint)
    res = bench(ckpt.params, ckpt.config, args.seq_len, args.repetitions)
    text = res.to_json()
    if args.out:
        _write(Path(args.out), text)
    print(text, end="")
    return 0


TIDY_COLUMNS = ["dataset", "variant", "metric", "mean", "std"]


def cmd_plot_data(args) -> int:
    from .evaluation import METRICS, RankingReport

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TIDY_COLUMNS)
    for path in args.reports:
        rep = RankingReport.from_json(Path(path).read_text())
        for name in METRICS:
            w.writerow([rep.dataset, rep.variant, name, repr(rep.metrics[name]["mean"]),
                        repr(rep.metrics[name]["std"])])
    _write(Path(args.out), buf.getvalue())
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="adspoi", description="Multi-state next-POI recommender pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, config_required=True):
        if config:
            sp.add_argument("--config", required=config_required)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--deterministic", action="store_true")

    sp = sub.add_parser("preprocess", help="parse and clean a raw check-in dump")
    sp.add_argument("--input", required=True)
    sp.add_argument("--format", choices=sorted(PARSERS), required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--min-user", type=int, default=10)
    sp.add_argument("--min-poi", type=int, default=10)
    sp.add_argument("--name")
    common(sp, config=False)
    sp.set_defaults(func=cmd_preprocess)

    sp = sub.add_parser("synth", help="generate a synthetic multi-regime dataset")
    sp.add_argument("--config")
    sp.add_argument("--out", required=True)
    sp.add_argument("--min-user", type=int, default=1)
    sp.add_argument("--min-poi", type=int, default=1)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--deterministic", action="store_true")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="train one model")
    common(sp)
    sp.add_argument("--resume")
    sp.add_argument("--epochs", type=int, help="epochs to run (added to the resumed epoch count)")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="full-ranking evaluation of a checkpoint")
    common(sp, config_required=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", choices=("val", "test"), default="test")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train and evaluate ablation variants over seeds")
    common(sp)
    sp.add_argument("--variant", default="all")
    sp.add_argument("--seeds")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("sweep", help="sensitivity sweep over K or d")
    common(sp)
    sp.add_argument("--axis", choices=("K", "d"), required=True)
    sp.add_argument("--values", required=True)
    sp.add_argument("--seeds")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every gradient coordinate")
    common(sp)
    sp.add_argument("--fd-step", type=float, default=1e-4)
    sp.add_argument("--n-pois", type=int, default=40)
    sp.add_argument("--tolerance", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)

    sp = sub.add_parser("bench", help="single-query latency, throughput, memory, FLOPs")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--seq-len", type=int, default=64)
    sp.add_argument("--repetitions", type=int, default=100)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("plot-data", help="merge report JSONs into one tidy CSV")
    sp.add_argument("reports", nargs="+")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_plot_data)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_HASH
    except (InputError, ContainerError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
