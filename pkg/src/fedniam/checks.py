"""Invariant suite behind ``fedniam verify``.

Each check returns ``(passed, detail)``. Mask construction is looked up on
the encoder module at call time so a patched builder is what gets verified.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import encoder as enc
from .config import config_from_dict
from .evaluation import harmonic_mean
from .federation import (
    ClientState,
    alignment_loss_from_similarities,
    extract_prototypes,
    local_cross_entropy_loss,
    refinement_loss,
    run_one_shot,
)
from .numerics import HARD, RngStream, Tensor, grad_check, masked_softmax, matmul, tsum


@dataclass
class PropertyResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def reference_mask(n_prompt: int, n_text: int, lam: float, causal: bool) -> np.ndarray:
    """Entry-by-entry enumeration of the masking rule with 1-based indices."""
    size = n_prompt + n_text + 1
    out = np.zeros((size, size))
    for i in range(1, size + 1):
        for j in range(1, size + 1):
            if (
                (1 <= i <= n_prompt and n_prompt + 1 <= j <= n_prompt + n_text)
                or (n_prompt + 1 <= i <= n_prompt + n_text and 1 <= j <= n_prompt)
                or j == n_prompt + n_text + 1
            ):
                value = HARD
            elif i == n_prompt + n_text + 1 and n_prompt + 1 <= j <= n_prompt + n_text:
                value = lam
            else:
                value = 0.0
            if causal and j > i:
                value = HARD
            out[i - 1, j - 1] = value
    return out


def _small_context(d_text: int = 16, n_prompt: int = 3, n_classes: int = 4, seed: int = 0, **overrides):
    cfg = enc.EncoderConfig(d_text=d_text, n_heads=4, n_prompt=n_prompt, n_text=6, d_embed=8, **overrides)
    return enc.EncoderContext.create(cfg, n_classes, RngStream(seed, "verify"))


def check_mask_bruteforce():
    mismatches = 0
    for n_p in range(5):
        for n_t in range(1, 5):
            for lam in (0.0, 0.5, 1.0):
                for causal in (False, True):
                    got = enc.build_niam_mask(n_p, n_t, lam, causal).bias
                    if not np.array_equal(got, reference_mask(n_p, n_t, lam, causal)):
                        mismatches += 1
    return mismatches == 0, f"{mismatches} mismatching (N_p, N_t, lambda, causal) cases out of 120"


def check_mask_reweighting():
    bad = []
    for lam in (0.2, 0.5, 0.7, 1.0):
        m = enc.build_niam_mask(2, 3, lam, True)
        band = m.bias[m.eos, 2:5]
        if not np.all(band == lam):
            bad.append(lam)
    return not bad, "EOS->text band equals lambda" if not bad else f"band wrong for lambda in {bad}"


def check_no_degenerate_rows():
    for n_p in range(5):
        for n_t in range(1, 5):
            m = enc.build_niam_mask(n_p, n_t, 0.5, True)
            if np.any(m.hard().all(axis=1)):
                return False, f"fully masked row at N_p={n_p}, N_t={n_t}"
    return True, "every row keeps at least one key"


def check_softmax_rows():
    g = np.random.default_rng(0)
    m = enc.build_niam_mask(3, 4, 0.7, True)
    p = masked_softmax(Tensor(g.normal(size=(5, m.size, m.size))), m).data
    row_err = float(np.abs(p.sum(-1) - 1).max())
    leaked = float(p[:, m.hard()].max())
    return row_err <= 1e-9 and leaked < 1e-30, f"row-sum error {row_err:.1e}, max hard prob {leaked:.1e}"


def check_isolation(cases: int = 100):
    worst = 0.0
    ctx = _small_context(d_text=32, n_prompt=10, seed=1)
    for case in range(cases):
        g = np.random.default_rng(case)
        n_p = (0, 2, 10)[case % 3]
        delta = Tensor(g.normal(0, 1.0, (n_p, ctx.config.d_text)))
        ref = ctx.encode(Tensor(np.zeros((0, ctx.config.d_text))), [case % 4]).tokens.data[0, :-1]
        out = ctx.encode(delta, [case % 4]).tokens.data[0, n_p:-1]
        worst = max(worst, float(np.abs(out - ref).max()))
    return worst <= 1e-9, f"max text-token deviation {worst:.2e} over {cases} cases"


def check_eos_not_attended():
    ctx = _small_context()
    probe: list[np.ndarray] = []
    ctx.encode(Tensor(np.random.default_rng(0).normal(size=(3, 16))), [0, 1], probe=probe)
    worst = max(float(p[..., -1].max()) for p in probe)
    return worst == 0.0, f"max attention onto the EOS key {worst:.1e}"


def check_eos_sensitivity():
    ctx = _small_context()
    g = np.random.default_rng(1)
    d1, d2 = Tensor(g.normal(size=(3, 16))), Tensor(g.normal(size=(3, 16)))
    e1, e2 = ctx.encode(d1, [0]).eos.data, ctx.encode(d2, [0]).eos.data
    ctx_lam = _small_context(lam=1.0)
    e3 = ctx_lam.encode(d1, [0]).eos.data
    moved_delta = float(np.abs(e1 - e2).max())
    moved_lam = float(np.abs(e1 - e3).max())
    return moved_delta > 1e-6 and moved_lam > 1e-6, f"EOS shift: delta {moved_delta:.2e}, lambda {moved_lam:.2e}"


def check_prompt_causality():
    ctx = _small_context(n_prompt=4)
    g = np.random.default_rng(2)
    base = g.normal(size=(4, 16))
    bumped = base.copy()
    bumped[2] += 1.0
    a = ctx.encode(Tensor(base), [0]).tokens.data[0]
    b = ctx.encode(Tensor(bumped), [0]).tokens.data[0]
    unchanged = float(np.abs(a[:2] - b[:2]).max())
    changed = float(np.abs(a[2] - b[2]).max())
    return unchanged == 0.0 and changed > 0, f"earlier prompts moved {unchanged:.1e}, bumped one {changed:.1e}"


def check_grad_matmul_chain():
    g = np.random.default_rng(3)
    w1, w2 = g.normal(size=(4, 5)), g.normal(size=(5, 2))
    err = grad_check(lambda x: tsum(matmul(matmul(x, Tensor(w1)), Tensor(w2))), g.normal(size=(3, 4)))
    return err <= 1e-4, f"max relative error {err:.1e}"


def check_grad_masked_softmax():
    g = np.random.default_rng(4)
    m = enc.build_niam_mask(2, 3, 0.5, True)
    w = g.normal(size=(m.size, m.size))
    err = grad_check(lambda x: tsum(masked_softmax(x, m) * w), g.normal(size=(m.size, m.size)))
    return err <= 1e-4, f"max relative error {err:.1e}"


def check_grad_local_loss():
    ctx = _small_context()
    g = np.random.default_rng(5)
    feats, labels = g.normal(size=(6, 8)), [0, 1, 2, 3, 0, 1]
    err = grad_check(lambda d: local_cross_entropy_loss(ctx, d, feats, labels, range(4)), g.normal(0, 0.5, (3, 16)))
    return err <= 1e-4, f"max relative error {err:.1e}"


def check_grad_refinement_loss():
    ctx = _small_context()
    g = np.random.default_rng(6)
    protos, labels = g.normal(size=(6, 8)), [3, 2, 1, 0, 0, 2]
    err = grad_check(lambda d: refinement_loss(ctx, d, protos, labels, range(4)), g.normal(0, 0.5, (3, 16)))
    return err <= 1e-4, f"max relative error {err:.1e}"


def check_hm_spots():
    a, b = harmonic_mean(81.53, 95.33), harmonic_mean(95.30, 95.50)
    return abs(a - 87.89) <= 0.01 and abs(b - 95.40) <= 0.02, f"HM = {a:.4f}, {b:.4f}"


def check_refinement_constants():
    ctx = _small_context(n_classes=1)
    g = np.random.default_rng(7)
    one = refinement_loss(ctx, Tensor(g.normal(size=(3, 16))), g.normal(size=(4, 8)), [0] * 4, [0]).item()
    two = alignment_loss_from_similarities(Tensor([[0.9, 0.1]]), np.array([0])).item()
    margin = 0.9 - math.log(math.exp(0.9) + math.exp(0.1))
    expected = math.log1p(math.exp(-margin))
    return (
        abs(one - math.log(2)) <= 1e-9 and abs(two - expected) <= 1e-12,
        f"C=1 loss {one:.12f}, 2-class {two:.6f} (hand value {expected:.6f})",
    )


def check_prototypes():
    from .data import TaskSpec, dirichlet_partition, generate_task

    ds = generate_task(TaskSpec(n_classes=4, d_embed=8, samples_per_class_per_domain=6, n_domains=1), 0)
    shard = dirichlet_partition(ds.select("train"), 2, 0.5, RngStream(0, "p"))[0]
    client = ClientState(0, shard, np.zeros((3, 16)), None)
    p1 = extract_prototypes(client, ds, 5, RngStream(0, "proto"))
    client.delta = np.ones((3, 16))
    p2 = extract_prototypes(client, ds, 5, RngStream(0, "proto"))
    same = all(np.array_equal(a.vector, b.vector) for a, b in zip(p1, p2))
    inside = True
    for p in p1:
        f = ds.feature_matrix([s for s in shard.samples if s.class_id == p.class_id])
        inside &= bool(np.all(p.vector >= f.min(0) - 1e-12) and np.all(p.vector <= f.max(0) + 1e-12))
    count_ok = len(p1) == 5 * len(shard.classes())
    return same and inside and count_ok, f"{len(p1)} prototypes, reproducible={same}, in hull={inside}"


def check_one_shot():
    cfg = config_from_dict(
        {
            "task": {"n_classes": 4, "d_embed": 8, "samples_per_class_per_domain": 8, "test_per_class_per_domain": 4},
            "encoder": {"d_text": 16, "n_prompt": 2, "n_text": 6, "d_embed": 8},
            "federation": {"n_clients": 3, "local_epochs": 1, "refine_epochs": 1},
        }
    )
    res = run_one_shot(cfg)
    ok = res.ledger.total_uploads == 3 and res.ledger.total_downloads == 3
    frozen = all(a == b for a, b in res.checksums.values())
    return ok and frozen, f"uploads={res.ledger.total_uploads}, downloads={res.ledger.total_downloads}, frozen={frozen}"


PROPERTIES: dict[str, Callable[[], tuple[bool, str]]] = {
    "mask_bruteforce_equivalence": check_mask_bruteforce,
    "mask_reweighting_band": check_mask_reweighting,
    "mask_no_degenerate_rows": check_no_degenerate_rows,
    "softmax_rows_and_hard_zeros": check_softmax_rows,
    "text_token_isolation": check_isolation,
    "eos_key_never_attended": check_eos_not_attended,
    "eos_depends_on_prompt_and_lambda": check_eos_sensitivity,
    "prompt_block_causality": check_prompt_causality,
    "grad_matmul_chain": check_grad_matmul_chain,
    "grad_masked_softmax": check_grad_masked_softmax,
    "grad_local_loss": check_grad_local_loss,
    "grad_refinement_loss": check_grad_refinement_loss,
    "harmonic_mean_spot_checks": check_hm_spots,
    "refinement_loss_constants": check_refinement_constants,
    "prototype_contracts": check_prototypes,
    "one_shot_ledger_and_frozen_weights": check_one_shot,
}


def run_verify() -> list[PropertyResult]:
    results = []
    for name, fn in PROPERTIES.items():
        start = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception as exc:  # a crashing check is a failing property
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(PropertyResult(name, bool(passed), detail, time.perf_counter() - start))
    return results
