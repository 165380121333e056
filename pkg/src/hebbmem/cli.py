"""Command-line interface: ``hebbmem run | sweep | verify | inspect-memory``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import config as config_mod
from .adaptation import dynamic_weight
from .harness import METHODS, SWEEPABLE, run_scenario, sweep, write_atomic
from .memory import EpisodicMemory, SnapshotError
from .verify import SUITES, run_all

OUT_ENV = "HEBB_OUT_DIR"
DEFAULT_OUT = "results"
_ALIASES = {"lambda": "lam"}

PRECEDENCE = f"""\
settings are resolved in this order, later wins:
  1. built-in defaults
  2. --preset KIND, or the CONFIG file
  3. --set key=value (dotted paths, e.g. --set adaptation.eta=0.5)
  4. dedicated flags (--method, --seed, --kind)
output directory: --out-dir, else ${OUT_ENV}, else ./{DEFAULT_OUT}
"""


def _scenario_args(p: argparse.ArgumentParser):
    src = p.add_mutually_exclusive_group()
    src.add_argument("config", nargs="?", help="YAML or JSON scenario file")
    src.add_argument("--preset", choices=("continual", "incremental", "online"),
                     help="start from a packaged desk-scale configuration")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config field by dotted path (repeatable)")
    p.add_argument("--method", dest="methods", action="append", choices=METHODS,
                   help="method to evaluate (repeatable); replaces the config's list")
    p.add_argument("--seed", dest="seeds", action="append", type=int,
                   help="seed to run (repeatable); replaces the config's list")
    p.add_argument("--kind", choices=("continual", "incremental", "online"), help="scenario kind")
    p.add_argument("--out-dir", help=f"directory for CSV output (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
    p.add_argument("--name", help="output file stem (default: config file stem or scenario kind)")
    p.add_argument("--workers", type=int, default=1, help="processes for independent runs (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hebbmem",
        description="Memory-based Hebbian adaptation experiments on synthetic tasks.",
        epilog=PRECEDENCE,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario and write its CSV", epilog=PRECEDENCE,
                         formatter_class=argparse.RawDescriptionHelpFormatter)
    _scenario_args(run)
    run.add_argument("--save-state", action="store_true",
                     help="also write per-seed layer (.layer) and memory (.mem) snapshots")
    run.add_argument("--print-config", action="store_true", help="print the resolved config and exit")

    sw = sub.add_parser("sweep", help="grid over two adaptation parameters", epilog=PRECEDENCE,
                        formatter_class=argparse.RawDescriptionHelpFormatter)
    _scenario_args(sw)
    sw.add_argument("--grid", action="append", required=True, metavar="PARAM=V1,V2,...",
                    help=f"grid axis, given exactly twice; PARAM in {sorted(SWEEPABLE | set(_ALIASES))}")
    sw.add_argument("--metric", choices=("acc_overall", "acc_new", "acc_old"), action="append",
                    help="metric matrices to print (default: all three)")

    ver = sub.add_parser("verify", help="run the randomised invariant suites")
    ver.add_argument("--seed", type=int, default=0)
    ver.add_argument("--only", action="append", choices=sorted(SUITES), help="run only these suites")
    ver.add_argument("--inject-fault", choices=sorted(SUITES), help=argparse.SUPPRESS)

    ins = sub.add_parser("inspect-memory", help="summarise a memory snapshot")
    ins.add_argument("snapshot", help="path to a .mem snapshot")
    ins.add_argument("--beta", type=float, help="also print the Hebbian share E_i per class for this beta")
    return parser


# -- helpers -------------------------------------------------------------------------------

def _fail(msg: str, code: int = 2) -> int:
    print(f"hebbmem: error: {msg}", file=sys.stderr)
    return code


def _resolve_config(args):
    dotted = dict(config_mod.parse_override(o) for o in args.overrides)
    if args.methods:
        dotted["methods"] = list(args.methods)
    if args.seeds:
        dotted["seeds"] = list(args.seeds)
    if args.kind:
        dotted["kind"] = args.kind
    path = config_mod.preset_path(args.preset) if args.preset else args.config
    if path is not None and not Path(path).is_file():
        raise FileNotFoundError(f"config file not found: {path}")
    return config_mod.load_config(path, dotted)


def _out_dir(args) -> Path:
    return Path(args.out_dir or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def _stem(args, cfg) -> str:
    if args.name:
        return args.name
    if args.config:
        return Path(args.config).stem
    return cfg.kind


def _parse_grid(item: str):
    if "=" not in item:
        raise config_mod.ConfigError(f"--grid {item!r}: expected PARAM=V1,V2,...")
    name, raw = item.split("=", 1)
    name = _ALIASES.get(name.strip(), name.strip())
    if name not in SWEEPABLE:
        raise config_mod.ConfigError(f"--grid {item!r}: cannot sweep {name!r}; choose from {sorted(SWEEPABLE)}")
    values = []
    for tok in raw.split(","):
        tok = tok.strip()
        try:
            values.append(int(tok) if name in ("k", "steps") else float(tok))
        except ValueError:
            raise config_mod.ConfigError(f"--grid {item!r}: bad value {tok!r}") from None
    if not values:
        raise config_mod.ConfigError(f"--grid {item!r}: no values")
    return name, values


# -- commands ------------------------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = _resolve_config(args)
    if args.print_config:
        print(config_mod.dump(cfg), end="")
        return 0
    result = run_scenario(cfg, workers=args.workers)
    out = _out_dir(args)
    stem = _stem(args, cfg)
    csv_path = out / f"{stem}.csv"
    write_atomic(csv_path, result.to_csv())
    if args.save_state:
        for seed in cfg.seeds:
            EpisodicMemory.from_bytes(result.memories[seed]).save(out / f"{stem}.seed{seed}.mem")
            (out / f"{stem}.seed{seed}.layer").write_bytes(result.layers[seed])
    print(f"{cfg.kind}: {len(cfg.seeds)} seed(s), final position averaged over seeds")
    print(result.summary())
    print(f"wrote {csv_path}")
    return 0


def cmd_sweep(args) -> int:
    if len(args.grid) != 2:
        return _fail("sweep needs exactly two --grid axes")
    cfg = _resolve_config(args)
    (pa, va), (pb, vb) = (_parse_grid(g) for g in args.grid)
    res = sweep(cfg, pa, va, pb, vb, workers=args.workers)
    csv_path = _out_dir(args) / f"{_stem(args, cfg)}.sweep.csv"
    write_atomic(csv_path, res.to_csv())
    metrics = args.metric or ["acc_overall", "acc_new", "acc_old"]
    for method in cfg.methods:
        for metric in metrics:
            print(res.format_matrix(method, metric))
            print()
    print(f"wrote {csv_path}")
    return 0


def cmd_verify(args) -> int:
    results = run_all(seed=args.seed, fault=args.inject_fault, names=args.only)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.ok]
    if failed:
        print(f"FAILED invariants: {', '.join(failed)}")
        return 1
    print(f"all {len(results)} invariant suites passed")
    return 0


def cmd_inspect_memory(args) -> int:
    mem = EpisodicMemory.load(args.snapshot)
    print(f"entries:  {len(mem)}")
    print(f"dim:      {mem.dim}")
    print(f"capacity: {mem.capacity}")
    counts = mem.class_counts
    if not counts:
        print("classes:  none")
        return 0
    print(f"classes:  {len(counts)}")
    header = f"{'class':>8}{'count':>10}"
    if args.beta is not None:
        header += f"{'E_i':>12}"
    print(header)
    for cls, n in counts.items():
        line = f"{cls:>8}{n:>10}"
        if args.beta is not None:
            line += f"{float(dynamic_weight(n, args.beta)):>12.6f}"
        print(line)
    return 0


COMMANDS = {"run": cmd_run, "sweep": cmd_sweep, "verify": cmd_verify, "inspect-memory": cmd_inspect_memory}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "beta", None) is not None and not 0 <= args.beta < 1:
        return _fail(f"--beta must lie in [0, 1), got {args.beta}")
    if getattr(args, "workers", 1) < 1:
        return _fail("--workers must be at least 1")
    try:
        return COMMANDS[args.command](args)
    except FileNotFoundError as exc:
        return _fail(str(exc).replace("[Errno 2] ", ""))
    except (config_mod.ConfigError, SnapshotError, ValueError) as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
