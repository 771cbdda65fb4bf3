"""Command line: generate, train (pretrain / baseline / sf), eval, report.

Exit codes: 0 ok, 2 config error, 3 IO error, 4 missing prior-stage
checkpoint, 5 evaluation protocol error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext

from . import storage
from .config import (ConfigError, RunConfig, apply_overrides, describe_keys, dump_config,
                     load_config, parse_set)
from .evaluation import ProtocolError, read_metrics, write_reports
from .pipeline import StageState
from . import workflow as wf

log = logging.getLogger("gaitsf")

THREADS_ENV = "GAITSF_THREADS"
STAGES = ("pretrain", "baseline", "sf")
PRIOR = {"baseline": "pretrain", "sf": "baseline"}


class MissingCheckpoint(RuntimeError):
    def __init__(self, stage, path):
        super().__init__(f"missing {stage} checkpoint: {path}")
        self.stage = stage


# --------------------------------------------------------------------------
# helpers

def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    pairs = parse_set(args.set)
    if getattr(args, "seed", None) is not None:
        pairs.append(("seed", str(args.seed), None))
    return apply_overrides(cfg, pairs) if pairs else cfg


def _need_dataset(path):
    if not os.path.isfile(os.path.join(path, "manifest.jsonl")):
        raise FileNotFoundError(f"no dataset at {path} (manifest.jsonl missing)")


def _load_split(data_dir, split):
    _need_dataset(data_dir)
    seqs = storage.load_dataset(data_dir, split)
    if not seqs:
        raise ConfigError(f"dataset {data_dir} has no sequences in split {split!r}")
    return seqs


def _write_history(path, records, append=False):
    with open(path, "a" if append else "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _truncate_history(path, n):
    if not os.path.exists(path):
        return
    with open(path) as fh:
        lines = fh.readlines()[:n]
    with open(path, "w") as fh:
        fh.writelines(lines)


def _record_dict(rec):
    d = rec.to_dict()
    d.pop("wall_time", None)  # timing goes to the log only
    return d


# --------------------------------------------------------------------------
# commands

def cmd_generate(args) -> int:
    cfg = _config(args)
    pre, tr = wf.generate_splits(cfg)
    extra = {q.seq_id: {"split": "pretrain"} for q in pre}
    extra.update({q.seq_id: {"split": "train"} for q in tr})
    storage.save_dataset(args.out, pre + tr, extra=extra)
    with open(os.path.join(args.out, "config.txt"), "w") as fh:
        fh.write(dump_config(cfg))
    print(f"{len(pre) + len(tr)} sequences ({len(pre)} pretrain, {len(tr)} train) -> {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args)
    stage = args.stage
    out = os.path.join(args.run, stage)
    if stage in PRIOR:
        prior = os.path.join(args.run, PRIOR[stage], "params.bin")
        if not os.path.isfile(prior):
            raise MissingCheckpoint(PRIOR[stage], prior)
    _need_dataset(args.data)
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(dump_config(cfg))
    hist = os.path.join(out, "history.jsonl")

    if stage == "pretrain":
        seqs = _load_split(args.data, "pretrain")
        params, vc, history = wf.pretrain_stage(cfg, seqs, args.epochs)
        storage.save_params(os.path.join(out, "params.bin"), params)
        storage.save_view_classifier(os.path.join(out, "view.bin"), vc)
        _write_history(hist, history)
        r1 = wf.pretrain_rank1(seqs, params)
        print(f"pretrain: {len(history)} epochs, train rank-1 {100 * r1:.1f}%, "
              f"view classifier held-out accuracy {100 * vc.heldout_accuracy:.1f}%")
        return 0

    seqs = _load_split(args.data, "train")
    params = storage.load_params(os.path.join(args.run, PRIOR[stage], "params.bin"))
    ckdir = os.path.join(out, "ckpt")
    resume = None
    if args.resume and os.path.isfile(os.path.join(ckdir, "state.json")):
        with open(os.path.join(ckdir, "state.json")) as fh:
            resume = StageState.from_dict(json.load(fh))
        params = storage.load_params(os.path.join(ckdir, "params.bin"))
        _truncate_history(hist, resume.epoch)
        log.info("resuming %s at epoch %d", stage, resume.epoch)
    elif not args.resume:
        _write_history(hist, [])

    def on_epoch(rec, _params):
        _write_history(hist, [_record_dict(rec)], append=True)

    def on_checkpoint(p, bank, st):
        os.makedirs(ckdir, exist_ok=True)
        storage.save_params(os.path.join(ckdir, "params.bin"), p)
        if bank is not None:
            storage.save_bank(os.path.join(ckdir, "bank.bin"), bank)
        tmp = os.path.join(ckdir, "state.json.tmp")
        with open(tmp, "w") as fh:
            json.dump(st.to_dict(), fh, sort_keys=True)
        os.replace(tmp, os.path.join(ckdir, "state.json"))

    ckpt = dict(resume=resume, checkpoint_every=cfg.checkpoint_every,
                on_checkpoint=on_checkpoint)
    if stage == "baseline":
        params, records = wf.baseline_stage(cfg, seqs, params, args.epochs, callback=on_epoch,
                                            **ckpt)
    else:
        vc = None
        if cfg.view_flags == "classifier":
            vpath = os.path.join(args.run, "pretrain", "view.bin")
            if not os.path.isfile(vpath):
                raise MissingCheckpoint("pretrain", vpath)
            vc = storage.load_view_classifier(vpath)
        params, records = wf.sf_stage(cfg, seqs, params, vc, args.epochs, callback=on_epoch,
                                      **ckpt)
    storage.save_params(os.path.join(out, "params.bin"), params)
    done = (resume.epoch if resume else 0) + len(records)
    print(f"{stage}: {done} epochs, history -> {hist}")
    return 0


def _resolve_checkpoint(path):
    if os.path.isdir(path):
        path = os.path.join(path, "params.bin")
    if not os.path.isfile(path):
        raise MissingCheckpoint("requested", path)
    return path


def cmd_eval(args) -> int:
    cfg = _config(args)
    pairs = []
    if args.ranks:
        pairs.append(("ranks", args.ranks, None))
    if args.gallery_seqs:
        pairs.append(("gallery_seqs", args.gallery_seqs, None))
    if args.split:
        pairs.append(("eval_split", args.split, None))
    if pairs:
        cfg = apply_overrides(cfg, pairs, where="command line")
    params = storage.load_params(_resolve_checkpoint(args.checkpoint))
    seqs = _load_split(args.data, cfg.eval_split)
    table = wf.evaluate_params(cfg, seqs, params)
    write_reports(table, args.out)
    parts = [f"{c} " + " ".join(f"{k}={v:.1f}" for k, v in d.items())
             for c, d in table.per_condition.items()]
    print("; ".join(parts) + (f"; skipped {table.skipped}" if table.skipped else ""))
    return 0


def cmd_report(args) -> int:
    rows = []
    for p in args.inputs:
        path = os.path.join(p, "metrics.json") if os.path.isdir(p) else p
        if not os.path.isfile(path):
            raise FileNotFoundError(f"no metrics at {path}")
        t = read_metrics(path)
        name = os.path.basename(os.path.dirname(os.path.abspath(path)))
        try:
            fb = f"{t.view_rank1(wf.FRONT_BACK):.1f}"
        except ProtocolError:
            fb = "-"
        rows.append((name, t, fb))
    conds = sorted({c for _, t, _ in rows for c in t.per_condition})
    ranks = sorted({k for _, t, _ in rows for k in t.ranks})
    head = ["run"] + [f"{c} R{k}" for c in conds for k in ranks] + ["0/180 R1"]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for name, t, fb in rows:
        cells = [name]
        for c in conds:
            for k in ranks:
                v = t.per_condition.get(c, {}).get(f"rank-{k}")
                cells.append("-" if v is None else f"{v:.1f}")
        cells.append(fb)
        lines.append("| " + " | ".join(cells) + " |")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    sys.stdout.write(text)
    return 0


# --------------------------------------------------------------------------
# entry point

def build_parser() -> argparse.ArgumentParser:
    keys = "config keys (defaults):\n" + describe_keys()
    fmt = argparse.RawDescriptionHelpFormatter
    ap = argparse.ArgumentParser(prog="gaitsf", epilog=keys, formatter_class=fmt,
                                 description="Unsupervised cloth-robust gait recognition "
                                             "on synthetic silhouettes.")
    ap.add_argument("--threads", type=int, default=None,
                    help=f"BLAS thread cap (default: ${THREADS_ENV} or library default)")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable; wins over --config)")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("generate", help="write a synthetic dataset", epilog=keys,
                       formatter_class=fmt)
    common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="run one training stage", epilog=keys, formatter_class=fmt)
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--stage", required=True, choices=STAGES)
    p.add_argument("--run", required=True, help="run directory holding one subdir per stage")
    p.add_argument("--epochs", type=int, help="override the stage's epoch count")
    p.add_argument("--resume", action="store_true", help="continue from the stage checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="rank-k identification", epilog=keys, formatter_class=fmt)
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True, help="params.bin or a stage directory")
    p.add_argument("--out", required=True)
    p.add_argument("--ranks", help="e.g. 1,5")
    p.add_argument("--gallery-seqs", help="gallery sequence numbers, e.g. 1,2")
    p.add_argument("--split", choices=("train", "pretrain"))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="tabulate metrics.json files")
    p.add_argument("inputs", nargs="+", help="metrics.json files or directories holding one")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def _thread_limit(n):
    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else None
    if n is None:
        return nullcontext()
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except MissingCheckpoint as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except ProtocolError as e:
        print(f"protocol error: {e}", file=sys.stderr)
        return 5
    except (OSError, storage.FormatError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
