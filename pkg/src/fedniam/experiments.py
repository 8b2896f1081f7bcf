"""Grids over ablation variants and hyperparameters, plus CSV/JSON result export."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .config import AblationConfig, RunConfig
from .evaluation import average_domains, harmonic_mean
from .federation import RunResult, StageError, run_one_shot

log = logging.getLogger(__name__)

BASE_COLUMNS = [
    "run_id",
    "seed",
    "variant",
    "hard_masking",
    "reweighting",
    "cscr",
    "local_stage",
    "lam",
    "n",
    "beta",
    "K",
    "E",
    "E_prime",
    "acc_base",
    "acc_novel",
    "hm",
]
TAIL_COLUMNS = ["comm_volume", "error"]


def _cell_fields(config: RunConfig) -> dict[str, Any]:
    a = config.ablation
    fed = config.federation
    return {
        "seed": config.seed,
        "variant": a.name,
        "hard_masking": a.hard_masking,
        "reweighting": a.reweighting,
        "cscr": a.cscr,
        "local_stage": a.local_stage,
        "lam": config.encoder.lam,
        "n": fed.n_prototypes,
        "beta": fed.beta,
        "K": fed.n_clients if config.protocol == "base_novel" else None,
        "E": fed.local_epochs,
        "E_prime": fed.refine_epochs,
    }


def result_row(result: RunResult) -> dict[str, Any]:
    m = result.metrics
    row = {"run_id": result.run_id, **_cell_fields(result.config)}
    if row["K"] is None:
        row["K"] = len(result.shards)
    row.update(acc_base=m.acc_base, acc_novel=m.acc_novel, hm=m.hm, comm_volume=m.comm_volume, error="")
    for d, acc in m.per_domain.items():
        row[f"domain_{d}"] = acc
    return row


def failed_row(config: RunConfig, exc: BaseException) -> dict[str, Any]:
    row = {"run_id": "failed", **_cell_fields(config)}
    row.update(acc_base=None, acc_novel=None, hm=None, comm_volume=None, error=str(exc))
    return row


def grid_configs(
    base: RunConfig,
    variants: Sequence[AblationConfig],
    lams: Sequence[float] | None = None,
    ns: Sequence[int] | None = None,
    seeds: Sequence[int] | None = None,
) -> list[RunConfig]:
    lams = list(lams) if lams else [base.encoder.lam]
    ns = list(ns) if ns else [base.federation.n_prototypes]
    seeds = list(seeds) if seeds is not None else [base.seed]
    out = []
    for variant in variants:
        for lam in lams:
            for n in ns:
                for seed in seeds:
                    cfg = base.with_ablation(dataclasses.replace(variant, lam=lam))
                    cfg = dataclasses.replace(
                        cfg, seed=seed, federation=dataclasses.replace(cfg.federation, n_prototypes=n)
                    )
                    out.append(cfg)
    return out


def run_ablation_grid(
    base: RunConfig,
    variants: Sequence[AblationConfig],
    lams: Sequence[float] | None = None,
    ns: Sequence[int] | None = None,
    seeds: Sequence[int] | None = None,
) -> list[dict[str, Any]]:
    """One long-format row per (variant, lam, n, seed); failed cells keep a row with the error."""
    rows = []
    for cfg in grid_configs(base, variants, lams, ns, seeds):
        try:
            rows.append(result_row(run_one_shot(cfg)))
        except (StageError, ValueError, RuntimeError) as exc:
            log.warning("grid cell %s failed: %s", cfg.ablation.name, exc)
            rows.append(failed_row(cfg, exc))
    return rows


def seeds_per_cell(rows: Iterable[dict[str, Any]]) -> dict[tuple, tuple[int, ...]]:
    cells: dict[tuple, list[int]] = defaultdict(list)
    for r in rows:
        cells[(r["variant"], r["lam"], r["n"])].append(r["seed"])
    return {k: tuple(sorted(v)) for k, v in cells.items()}


def run_lodo_sweep(base: RunConfig) -> tuple[list[RunResult], dict[int, float], float]:
    """Hold out each domain in turn; returns results, per-domain accuracy and their mean."""
    results = []
    per_domain: dict[int, float] = {}
    for d in range(base.task.n_domains):
        cfg = dataclasses.replace(base, protocol="lodo", held_out_domain=d)
        res = run_one_shot(cfg)
        results.append(res)
        per_domain[d] = res.metrics.per_domain[d]
    return results, per_domain, average_domains(per_domain)


# -- export -------------------------------------------------------------------------
def _fmt(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def columns_for(rows: Sequence[dict[str, Any]]) -> list[str]:
    domains = sorted({k for r in rows for k in r if k.startswith("domain_")}, key=lambda k: int(k.split("_")[1]))
    return BASE_COLUMNS + domains + TAIL_COLUMNS


def rows_to_csv(rows: Sequence[dict[str, Any]], columns: Sequence[str] | None = None) -> str:
    columns = list(columns) if columns else columns_for(rows)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def write_csv(rows: Sequence[dict[str, Any]], path: Path, columns: Sequence[str] | None = None) -> None:
    path.write_text(rows_to_csv(rows, columns))


def write_json(payload: Any, path: Path) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _mean(values: list[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def summarize(rows: Sequence[dict[str, Any]], keys: Sequence[str]) -> list[dict[str, Any]]:
    """Mean accuracies grouped by ``keys`` (failed cells excluded from the means)."""
    groups: dict[tuple, list[dict[str, Any]]] = defaultdict(list)
    for r in rows:
        groups[tuple(r[k] for k in keys)].append(r)
    out = []
    for key, members in groups.items():
        ok = [m for m in members if not m.get("error")]
        base, novel = _mean([m["acc_base"] for m in ok]), _mean([m["acc_novel"] for m in ok])
        out.append(
            {
                **dict(zip(keys, key)),
                "runs": len(members),
                "failed": len(members) - len(ok),
                "acc_base": base,
                "acc_novel": novel,
                "hm": None if base is None or novel is None else harmonic_mean(base, novel),
            }
        )
    return out
