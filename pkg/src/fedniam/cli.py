"""Command line entry point: ``fedniam run | ablate | verify``.

Exit codes: 0 success, 1 a verified property failed, 2 execution error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import typing
from pathlib import Path
from typing import Sequence

from .config import ConfigError, RunConfig, override_flags, parse_config
from .data import dataset_snapshot
from .evaluation import ABLATION_VARIANTS
from .experiments import (
    result_row,
    run_ablation_grid,
    run_lodo_sweep,
    seeds_per_cell,
    summarize,
    write_csv,
    write_json,
)
from .federation import StageError, run_one_shot

EXIT_OK, EXIT_PROPERTY, EXIT_ERROR = 0, 1, 2
OUTPUT_ROOT_ENV = "FEDNIAM_OUTPUT_ROOT"

def _csv_list(kind):
    def parse(text: str):
        return [kind(x) for x in text.split(",") if x.strip()]

    return parse


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    group = p.add_argument_group("configuration fields")
    for dotted, annotation in override_flags():
        metavar = getattr(typing.get_args(annotation)[0] if typing.get_args(annotation) else annotation, "__name__", "V")
        group.add_argument(f"--{dotted}", dest=f"set:{dotted}", metavar=metavar.upper(), default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedniam", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="one single-round federated run plus evaluation")
    _add_config_flags(run)
    run.add_argument("--all-domains", action="store_true", help="lodo protocol: hold out every domain in turn")

    ablate = sub.add_parser("ablate", help="grid over ablation variants, lambda and n")
    _add_config_flags(ablate)
    ablate.add_argument("--variants", default="components", choices=["components", "config", "baseline"])
    ablate.add_argument("--lams", type=_csv_list(float), default=None, help="comma-separated lambda values")
    ablate.add_argument("--ns", type=_csv_list(int), default=None, help="comma-separated prototype counts")
    ablate.add_argument("--seeds", type=_csv_list(int), default=None, help="comma-separated seeds")

    sub.add_parser("verify", help="run the invariant suite and report pass/fail per property")
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("set:") and v is not None}
    if args.out:
        overrides["output_dir"] = args.out
    return parse_config(args.config, overrides)


def output_dir(config: RunConfig) -> Path:
    out = Path(config.output_dir)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        out = Path(root) / out
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(config: RunConfig, all_domains: bool = False) -> int:
    out = output_dir(config)
    write_json(config.to_dict(), out / "config.json")
    if all_domains:
        results, per_domain, mean = run_lodo_sweep(config)
    else:
        results = [run_one_shot(config)]
        per_domain, mean = None, None
    rows = [result_row(r) for r in results]
    write_csv(rows, out / "results.csv")
    payload = {"config": config.to_dict(), "runs": [{"row": row, "metrics": r.metrics.to_dict()} for row, r in zip(rows, results)]}
    if per_domain is not None:
        payload["lodo"] = {"per_domain": per_domain, "average": mean}
    write_json(payload, out / "results.json")
    first = results[0]
    write_json(dataset_snapshot(first.dataset, first.shards), out / "dataset.json")
    write_json({r.run_id: r.ledger.to_dict() for r in results}, out / "ledger.json")
    for row, r in zip(rows, results):
        scores = " ".join(f"{k}={_show(v)}" for k, v in row.items() if k.startswith(("acc_", "hm", "domain_")))
        print(f"{row['run_id']}: {scores} uploads={r.ledger.total_uploads}")
    if mean is not None:
        print(f"leave-one-domain-out average: {mean:.2f}")
    print(f"artifacts written to {out}")
    return EXIT_OK


def _show(v) -> str:
    return "-" if v is None else f"{v:.2f}"


def _variants(name: str, config: RunConfig):
    if name == "components":
        return list(ABLATION_VARIANTS)
    if name == "baseline":
        return [ABLATION_VARIANTS[0]]
    return [config.ablation]


def cmd_ablate(config: RunConfig, variants, lams=None, ns=None, seeds=None) -> int:
    out = output_dir(config)
    rows = run_ablation_grid(config, variants, lams, ns, seeds)
    write_csv(rows, out / "ablation.csv")
    write_json({"base_config": config.to_dict(), "rows": rows, "seeds_per_cell": {str(k): v for k, v in seeds_per_cell(rows).items()}}, out / "ablation.json")
    cells = summarize(rows, ["variant", "lam", "n"])
    write_csv(cells, out / "summary_cells.csv", list(cells[0]))
    for axis in ("variant", "lam", "n"):
        summary = summarize(rows, [axis])
        write_csv(summary, out / f"summary_by_{axis}.csv", list(summary[0]))
    failed = sum(1 for r in rows if r.get("error"))
    print(f"{len(rows)} grid rows ({failed} failed), {len(cells)} cells; artifacts written to {out}")
    return EXIT_OK


def cmd_verify() -> int:
    from .checks import run_verify

    results = run_verify()
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<38} {r.detail}  ({r.seconds:.2f}s)")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} properties hold")
    return EXIT_PROPERTY if failed else EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "verify":
            return cmd_verify()
        config = config_from_args(args)
        if args.command == "run":
            return cmd_run(config, args.all_domains)
        return cmd_ablate(config, _variants(args.variants, config), args.lams, args.ns, args.seeds)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except StageError as exc:
        print(f"run failed at stage {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
