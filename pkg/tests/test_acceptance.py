"""Acceptance criteria 1-9, one test each; every test prints a PASS/FAIL line.

Training-based criteria (4-7) go through ``ntp.experiments`` with a result
cache under ``results/`` (override with ``NTP_RESULTS``). A cold run trains
every model; later runs reuse checkpoints and reports while the package
source is unchanged.
"""
import json
import os
import time
from pathlib import Path

import numpy as np
import pytest

from ntp.cli import main
from ntp.experiments import (AdversarialConfig, LengthConfig, ResultCache, SemanticsConfig, TotalityConfig,
                             run_adversarial, run_length, run_semantics, run_totality)
from ntp.expert import rollout_violations
from ntp.gradsuite import TINY_MODEL, TOLERANCE, run_suite
from ntp.taskgen import Family, enumerate_sorting_goals, make_splits, sample_task, sorting_cover

pytestmark = pytest.mark.acceptance

RESULTS = Path(os.environ.get("NTP_RESULTS", Path(__file__).resolve().parents[1] / "results"))


@pytest.fixture(scope="module")
def cache():
    return ResultCache(RESULTS)


def test_criterion_1_gradient_oracle(criterion):
    started = time.perf_counter()
    results = run_suite(seed=0, tolerance=TOLERANCE, loss_coords=None)
    elapsed = time.perf_counter() - started
    worst = max(results, key=lambda k: results[k]["max_rel_err"])
    failed = [k for k, r in results.items() if not r["passed"]]
    coords = sum(r["n_checked"] for r in results.values())
    criterion(1, not failed and elapsed < 300,
              f"{len(results)} checks, {coords} coords, worst {worst} rel err {results[worst]['max_rel_err']:.1e} "
              f"(< {TOLERANCE:.0e}), failed {failed}, {elapsed:.0f}s (< 300s)")


def test_criterion_2_expert_oracle(criterion):
    per_family = 1000
    failing = {}
    for fi, family in enumerate(Family):
        rng = np.random.default_rng(1000 + fi)
        for i in range(per_family):
            violations = rollout_violations(sample_task(family, rng), i)
            if violations:
                failing.setdefault(family.value, []).append(violations[0])
    criterion(2, not failing, f"{per_family} tasks x {len(Family)} families: replay success 1.0, nesting and label "
                              f"round-trip on every trace; failing {({k: len(v) for k, v in failing.items()})}")


def test_criterion_3_scoping_totality(cache, criterion):
    cfg = TotalityConfig()
    res = run_totality(cfg, cache)
    halted = sum(res["terminations"].values())
    ok = res["scope_violations"] == 0 and res["run_violations"] == 0 and halted == cfg.n_models
    criterion(3, ok, f"{cfg.n_scopes} decoded windows, {res['scope_violations']} out of bounds; {cfg.n_models} "
                     f"random-weight models halted {res['terminations']}, {res['run_violations']} over caps")


def test_criterion_4_length_generalization(cache, criterion):
    cfg = LengthConfig()
    res = run_length(cfg, cache)
    ntp, flat = res["success"]["NTP"], res["success"]["Flat"]
    top = str(max(cfg.grid))
    gap = ntp[top] - flat[top]
    ok = all(ntp[str(k)] >= 0.85 for k in cfg.grid) and gap >= 0.30 and res["wall_seconds"] < 7200
    criterion(4, ok, f"NTP {ntp}, Flat {flat}; need NTP >= 0.85 everywhere and gap at {top} = {gap:.2f} >= 0.30; "
                     f"cold run {res['wall_seconds']:.0f}s (< 7200s)")


def test_criterion_5_semantics_trend(cache, criterion):
    cfg = SemanticsConfig()
    res = run_semantics(cfg, cache)
    table = res["success"]["NTP"]
    unseen = [table[str(n)]["unseen"] for n in cfg.n_train_grid]
    top = table[str(max(cfg.n_train_grid))]
    monotone = all(b >= a - 0.05 for a, b in zip(unseen, unseen[1:]))
    ok = monotone and top["unseen"] >= 0.70 and top["seen"] - top["unseen"] <= 0.15
    criterion(5, ok, f"{cfg.n_blocks}-block stacking, unseen by n_train {dict(zip(cfg.n_train_grid, unseen))} "
                     f"(non-decreasing within 0.05: {monotone}); at {max(cfg.n_train_grid)}: unseen "
                     f"{top['unseen']:.2f} >= 0.70, seen - unseen {top['seen'] - top['unseen']:.2f} <= 0.15")


def test_criterion_6_scoping_ablation(cache, criterion):
    cfg = SemanticsConfig()
    res = run_semantics(cfg, cache)
    n = str(max(cfg.n_train_grid))
    ntp = res["success"]["NTP"][n]["unseen"]
    noscope = res["success"][cfg.ablation_variant][n]["unseen"]
    criterion(6, ntp - noscope >= 0.10, f"unseen at n_train={n}: NTP {ntp:.2f}, NoScope {noscope:.2f}, "
                                        f"gap {ntp - noscope:.2f} >= 0.10")


def test_criterion_7_adversarial_ordering(cache, criterion):
    cfg = AdversarialConfig()
    res = run_adversarial(cfg, cache)
    d_ntp, d_gru = res["drops"]["NTP"], res["drops"]["NTP_GRU"]
    ok = d_ntp <= d_gru - 0.10 and d_ntp <= 0.30
    rates = {k: round(v, 3) for k, v in res["success"].items()}
    criterion(7, ok, f"prob {cfg.prob}, {cfg.episodes} episodes per arm {rates}; drop NTP {d_ntp:.2f} <= "
                     f"drop GRU {d_gru:.2f} - 0.10 and <= 0.30")


def test_criterion_8_task_space_counts(criterion):
    split = make_splits("object_sorting", "semantics", np.random.default_rng(0))
    counts = (len(enumerate_sorting_goals()), len(sorting_cover()), len(split.seen), len(split.unseen))
    criterion(8, counts == (256, 4, 4, 252) and split.disjoint(),
              f"sorting goals {counts[0]}, cover {counts[1]}, seen {counts[2]}, unseen {counts[3]} (256/4/4/252)")


def _pipeline(root: Path) -> dict[str, bytes]:
    data, ckpt = root / "data", root / "model.ckpt"
    root.mkdir(parents=True)
    cfg = root / "config.json"
    cfg.write_text(json.dumps({"model": {"variant": "NTP", **TINY_MODEL},
                               "train": {"epochs": 2, "batches_per_epoch": 4, "batch_size": 16}}))
    assert main(["gen-data", "--family", "stacking", "--axis", "semantics", "--n-train", "6", "--n-unseen", "6",
                 "--traces-per-task", "2", "--seed", "11", "--out", str(data)]) == 0
    assert main(["train", "--data", str(data), "--config", str(cfg), "--out", str(ckpt)]) == 0
    for fmt in ("json", "csv"):
        assert main(["eval", "--checkpoint", str(ckpt), "--data", str(data), "--episodes", "4", "--seed", "2",
                     "--out", str(root / f"report.{fmt}")]) == 0
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_9_determinism(tmp_path, criterion):
    a = _pipeline(tmp_path / "a")
    b = _pipeline(tmp_path / "b")
    differing = sorted(k for k in a if a[k] != b.get(k))
    ok = a.keys() == b.keys() and not differing
    criterion(9, ok, f"{len(a)} files (dataset, checkpoint, JSON and CSV reports) byte-identical across two runs; "
                     f"differing {differing}")
