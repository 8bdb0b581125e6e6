"""Command-line entry point.

Every command works inside a run directory (``--run-dir``); relative paths are
resolved under ``$FMRI2TEXT_RUN_ROOT`` when it is set. Stage outputs are
append-only: rerunning a stage whose checkpoint exists needs ``--force``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path


from fmri2text import data as D
from fmri2text import training as T
from fmri2text.config import ConfigError, config_hash, load_config
from fmri2text.numerics import ValidationError

log = logging.getLogger("fmri2text")

RUN_ROOT_ENV = "FMRI2TEXT_RUN_ROOT"
PREVIOUS = {"stage1": "pretrain", "stage2": "stage1", "generate": "stage2", "evaluate": "stage2"}


def resolve_run_dir(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _config(args, run: T.RunDir) -> dict:
    source = args.config
    if source is None:
        source = run.root / "config.yaml" if (run.root / "config.yaml").exists() else "default"
    return load_config(source, args.set)


def _guard(run: T.RunDir, name: str, force: bool) -> None:
    if (run.root / "checkpoints" / f"{name}.pt").exists() and not force:
        raise ValidationError(f"{run.root} already has a {name} checkpoint; pass --force to overwrite")


def _context(cfg: dict, run: T.RunDir, command: str) -> T.Context:
    ctx = T.make_context(cfg, run)
    prev = PREVIOUS.get(command)
    if prev is not None:
        path = run.root / "checkpoints" / f"{prev}.pt"
        if not path.exists():
            raise ValidationError(f"{command} needs the {prev} checkpoint at {path}")
        state = T.load_checkpoint(path, ctx)
        if state["config_hash"] != config_hash(cfg):
            log.warning("config differs from the one that produced %s", path.name)
    return ctx


def cmd_synth_data(args, cfg, run):
    target = run.root / "dataset"
    if (target / "manifest.json").exists() and not args.force:
        raise ValidationError(f"{target} already holds a dataset; pass --force to overwrite")
    ds = D.generate_synthetic_dataset(T.synthetic_config(cfg), cfg["seed"])
    D.export_dataset(ds, target)
    print(f"wrote {len(ds)} samples from {len(ds.subject_ids)} subjects to {target}")


def cmd_pretrain(args, cfg, run):
    _guard(run, "pretrain", args.force)
    out = T.pretrain(_context(cfg, run, "pretrain"))
    print(json.dumps(out))


def cmd_stage1(args, cfg, run):
    if args.resume is None:
        _guard(run, "stage1", args.force)
    ctx = _context(cfg, run, "stage1")
    out = T.run_stage1(ctx, resume=args.resume)
    print(json.dumps(out["last"]))
    print("\n".join(out["audit"].lines()))


def cmd_stage2(args, cfg, run):
    _guard(run, "stage2", args.force)
    out = T.run_stage2(_context(cfg, run, "stage2"))
    print(json.dumps(out["last"]))
    print("\n".join(out["audit"].lines()))


def cmd_generate(args, cfg, run):
    ctx = _context(cfg, run, "generate")
    idx = getattr(ctx.split, args.split)
    records = T.decode(ctx, idx[: args.limit] if args.limit else idx)
    out = run.path(f"generations_{args.split}.jsonl")
    with open(out, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")
    for r in records[:10]:
        print(f"{r.subject_id}\t{r.hypothesis}\t|\t{r.reference}")
    print(f"wrote {len(records)} generations to {out}")


def cmd_evaluate(args, cfg, run):
    out = T.evaluate(_context(cfg, run, "evaluate"))
    print(out["report"].to_text())
    print(json.dumps(out["retrieval"]))


def cmd_report(args, cfg, run):
    path = run.root / "records.jsonl"
    if not path.exists():
        raise ValidationError(f"no records at {path}; run evaluate first")
    if args.format == "tsv":
        print((run.root / "report.tsv").read_text(), end="")
    else:
        print((run.root / "report.txt").read_text(), end="")


def cmd_audit(args, cfg, run):
    ok = True
    snaps = sorted((run.root / "snapshots").glob("*.json"))
    if not snaps:
        raise ValidationError(f"no stage snapshots under {run.root}")
    for snap in snaps:
        s = json.loads(snap.read_text())
        audit = T.freeze_audit(s["before"], s["after"], s["declared"])
        print(f"[{snap.stem}] declared trainable: {', '.join(audit.declared)}")
        for line in audit.lines():
            print("  " + line)
        ok &= audit.passed
    leak_path = run.root / "audit" / "leak.json"
    leak = json.loads(leak_path.read_text()) if leak_path.exists() else {"violations": []}
    n = sum(len(v["samples"]) for v in leak["violations"])
    print(f"protected-sample reads by training paths: {n}")
    ok &= n == 0
    consumption = run.root / "audit" / "consumption.json"
    if consumption.exists():
        for phase, subs in json.loads(consumption.read_text()).items():
            print(f"[{phase}] subjects consumed: {', '.join(sorted(subs))}")
    print("audit passed" if ok else "audit FAILED")
    return 0 if ok else 1


COMMANDS = {
    "synth-data": (cmd_synth_data, "generate and export the synthetic dataset"),
    "pretrain": (cmd_pretrain, "pretrain the base models, then freeze them"),
    "stage1": (cmd_stage1, "fMRI-video alignment"),
    "stage2": (cmd_stage2, "instruction tuning with domain adaptation"),
    "generate": (cmd_generate, "greedy captions for a split"),
    "evaluate": (cmd_evaluate, "retrieval + caption metrics, writes report.tsv"),
    "report": (cmd_report, "print the last metric report"),
    "audit": (cmd_audit, "freeze and leak audit of a run"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fmri2text", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--run-dir", required=True)
        p.add_argument("--config", help="YAML config (default: the run's config.yaml, else built-in defaults)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override")
        p.add_argument("--force", action="store_true", help="overwrite existing stage outputs")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "stage1":
            p.add_argument("--resume", help="checkpoint to resume from")
        if name == "generate":
            p.add_argument("--split", default="source_holdout", choices=["source_holdout", "target_test"])
            p.add_argument("--limit", type=int, default=0)
        if name == "report":
            p.add_argument("--format", default="text", choices=["text", "tsv"])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = T.RunDir(resolve_run_dir(args.run_dir))
        cfg = _config(args, run)
        if args.command not in ("report", "audit"):
            run.write_config(cfg, args.command)
        code = COMMANDS[args.command][0](args, cfg, run)
        return code or 0
    except (ValidationError, ConfigError, D.DatasetError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (T.TrainingError, RuntimeError, OSError) as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
