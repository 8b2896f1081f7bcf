import csv
import dataclasses
import io

import pytest

from fedniam import experiments
from fedniam.config import AblationConfig, config_from_dict
from fedniam.evaluation import ABLATION_VARIANTS, harmonic_mean
from fedniam.experiments import (
    BASE_COLUMNS,
    grid_configs,
    rows_to_csv,
    run_ablation_grid,
    run_lodo_sweep,
    seeds_per_cell,
    summarize,
)
from fedniam.federation import StageError


@pytest.fixture(scope="module")
def base():
    return config_from_dict(
        {
            "task": {"n_classes": 4, "d_embed": 8, "samples_per_class_per_domain": 6, "test_per_class_per_domain": 3},
            "encoder": {"d_text": 16, "n_prompt": 2, "n_text": 6, "d_embed": 8},
            "federation": {"n_clients": 2, "local_epochs": 1, "refine_epochs": 1, "lr": 0.1, "refine_lr": 0.1},
        }
    )


def test_two_by_two_grid(base):
    rows = run_ablation_grid(base, [ABLATION_VARIANTS[-1]], lams=[0.2, 0.7], ns=[3, 5])
    assert len(rows) == 4
    assert {(r["lam"], r["n"]) for r in rows} == {(0.2, 3), (0.2, 5), (0.7, 3), (0.7, 5)}
    assert len(summarize(rows, ["variant", "lam", "n"])) == 4
    for r in rows:
        assert r["hm"] == harmonic_mean(r["acc_base"], r["acc_novel"])


def test_baseline_present_and_seeds_shared(base):
    rows = run_ablation_grid(base, ABLATION_VARIANTS[:2], seeds=[0, 1])
    assert any(not r["hard_masking"] and not r["reweighting"] and not r["cscr"] for r in rows)
    assert set(seeds_per_cell(rows).values()) == {(0, 1)}


def test_grid_configs_apply_variant(base):
    cfgs = grid_configs(base, [AblationConfig(hard_masking=False, cscr=False)], lams=[0.0], ns=[10], seeds=[5])
    (cfg,) = cfgs
    assert (cfg.encoder.hard_masking, cfg.federation.cscr, cfg.encoder.lam, cfg.federation.n_prototypes, cfg.seed) == (
        False, False, 0.0, 10, 5)


def test_failed_cell_keeps_row(base, monkeypatch):
    real = experiments.run_one_shot

    def flaky(cfg):
        if cfg.encoder.lam == 0.5:
            raise StageError("server", RuntimeError("boom"))
        return real(cfg)

    monkeypatch.setattr(experiments, "run_one_shot", flaky)
    rows = run_ablation_grid(base, [ABLATION_VARIANTS[-1]], lams=[0.2, 0.5])
    assert len(rows) == 2
    failed = [r for r in rows if r["error"]]
    assert len(failed) == 1 and "server" in failed[0]["error"]
    (summary,) = [s for s in summarize(rows, ["lam"]) if s["lam"] == 0.5]
    assert summary["failed"] == 1 and summary["acc_base"] is None


def test_csv_layout_and_determinism(base):
    rows = run_ablation_grid(base, ABLATION_VARIANTS[:2])
    text = rows_to_csv(rows)
    assert text == rows_to_csv(run_ablation_grid(base, ABLATION_VARIANTS[:2]))
    parsed = list(csv.reader(io.StringIO(text)))
    header = parsed[0]
    assert header[: len(BASE_COLUMNS)] == BASE_COLUMNS
    assert header[-2:] == ["comm_volume", "error"]
    assert {"domain_0", "domain_1"} <= set(header)
    assert len(parsed) == 3


def test_lodo_sweep_averages_domains(base):
    cfg = dataclasses.replace(base, task=dataclasses.replace(base.task, n_domains=3), clients_per_domain=1)
    results, per_domain, mean = run_lodo_sweep(cfg)
    assert len(results) == 3 and sorted(per_domain) == [0, 1, 2]
    assert mean == pytest.approx(sum(per_domain.values()) / 3)
    assert len({r.run_id for r in results}) == 3
