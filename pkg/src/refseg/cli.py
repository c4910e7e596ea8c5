"""Command-line entry point: ``refseg {gen,train,eval,ablate,export-masks}``.

Settings come from an optional TOML file (``[run]`` and ``[data]``
tables) and are overridden by flags.  The output directory is ``--out``,
else ``$REFSEG_OUT``, else ``./refseg-out``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .ablation import AXES, ablate, write_csv
from .checkpoint import load_checkpoint, save_checkpoint
from .config import SCHEMES, SLOT_KINDS, load_config
from .errors import RefsegError
from .features import load_dataset, save_dataset
from .metrics import metrics_json
from .synthetic import generate_synthetic
from .training import evaluate, train

OUT_ENV = "REFSEG_OUT"
DEFAULT_OUT = "refseg-out"

log = logging.getLogger("refseg")

# flag -> RunConfig field
_RUN_FLAGS = {
    "seed": "seed",
    "slot_kind": "slot_kind",
    "kg": "k_g",
    "ks": "k_s",
    "t_iters": "t_iters",
    "tau": "tau",
    "scheme": "scheme",
    "lambda_recon": "lambda_recon",
    "precision": "precision",
    "epochs": "epochs",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML file with [run] and [data] tables")
    p.add_argument("--seed", type=int, help="run seed (gen: data seed)")
    p.add_argument("--slot-kind", choices=SLOT_KINDS)
    p.add_argument("--kg", type=int, help="number of slot groups K_g")
    p.add_argument("--ks", type=int, help="slots per group K_s")
    p.add_argument("--t-iters", type=int)
    p.add_argument("--tau", type=float)
    p.add_argument("--scheme", choices=SCHEMES)
    p.add_argument("--lambda-recon", type=float)
    p.add_argument("--precision", choices=("f32", "f64"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--out", type=Path, help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset directory")
    _common(p)
    p.add_argument("--items", type=int, help="number of scenes (overrides [data] num_items)")

    p = sub.add_parser("train", help="train on a dataset directory and write a checkpoint")
    _common(p)
    p.add_argument("--data", type=Path, help="dataset directory (default OUT/data)")

    for name, text in (("eval", "score a checkpoint on the held-out split"),
                       ("export-masks", "score and write predicted/ground-truth PGM masks")):
        p = sub.add_parser(name, help=text)
        _common(p)
        p.add_argument("--data", type=Path)
        p.add_argument("--checkpoint", type=Path, help="default OUT/checkpoint.sgck")

    p = sub.add_parser("ablate", help="run one ablation sweep and write a CSV table")
    _common(p)
    p.add_argument("--data", type=Path)
    p.add_argument("--axis", choices=AXES, required=True)
    p.add_argument("--seeds", type=int, nargs="+", help="seeds to average over (default: --seed)")
    return parser


def _out_dir(args) -> Path:
    out = args.out or Path(os.environ.get(OUT_ENV, DEFAULT_OUT))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _settings(args):
    cfg = load_config(args.config)
    changes = {field: getattr(args, flag) for flag, field in _RUN_FLAGS.items() if getattr(args, flag) is not None}
    run = cfg.run.replace(**changes)
    run.validate()
    return run, cfg.data


def _data_split(args, out: Path, run):
    data = load_dataset(args.data or out / "data")
    return data.split(run.train_fraction, run.seed)


def cmd_gen(args) -> int:
    out = _out_dir(args)
    _, spec = _settings(args)
    if args.seed is not None:
        spec.seed = args.seed
    if args.items is not None:
        spec.num_items = args.items
    data = generate_synthetic(spec)
    target = save_dataset(out / "data", data, {"spec": vars(spec)})
    print(f"wrote {len(data)} items to {target}")
    return 0


def cmd_train(args) -> int:
    out = _out_dir(args)
    run, _ = _settings(args)
    train_data, eval_data = _data_split(args, out, run)
    result = train(run, train_data, eval_data)
    save_checkpoint(out / "checkpoint.sgck", result.model, result.optimizer)
    (out / "history.json").write_text(json.dumps(result.history, indent=2) + "\n")
    final = result.history[-1]["eval"]
    (out / "metrics.json").write_text(metrics_json(final) + "\n")
    print(metrics_json(final))
    return 0


def _score(args, export: bool) -> int:
    out = _out_dir(args)
    ckpt = load_checkpoint(args.checkpoint or out / "checkpoint.sgck")
    run = ckpt.config
    data = load_dataset(args.data or out / "data")
    _, eval_data = data.split(run.train_fraction, run.seed)
    tau = args.tau if args.tau is not None else run.tau
    scheme = args.scheme or run.scheme
    export_dir = out / "masks" if export else None
    metrics = evaluate(ckpt.model, eval_data, run, tau=tau, scheme=scheme, export_dir=export_dir)
    text = metrics_json(metrics)
    (out / "metrics.json").write_text(text + "\n")
    print(text)
    return 0


def cmd_ablate(args) -> int:
    out = _out_dir(args)
    run, _ = _settings(args)
    train_data, eval_data = _data_split(args, out, run)
    rows = ablate(args.axis, run, train_data, eval_data, seeds=args.seeds)
    path = out / f"ablation_{args.axis}.csv"
    write_csv(path, rows)
    print(path.read_text(), end="")
    return 0


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": lambda a: _score(a, export=False),
    "export-masks": lambda a: _score(a, export=True),
    "ablate": cmd_ablate,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (RefsegError, OSError) as exc:
        print(f"refseg {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
