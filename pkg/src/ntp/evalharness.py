"""Evaluation protocols, experiment drivers and machine-readable reports."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from ntp.errors import ConfigurationError
from ntp.expert import PICK_AND_PLACE, ROOT_PROGRAM, demonstrate, plan
from ntp.interpreter import OraclePolicy, RunResult, RuntimeConfig, run, run_model
from ntp.model import NTPModel
from ntp.taskgen import DatasetSplit, SortingTask, TaskInstance
from ntp.worldsim import API_RELEASE, apply_adversary, reset

log = logging.getLogger(__name__)

ORACLE = "expert_oracle"


def episode_seeds(master_seed: int, index: int) -> dict[str, int]:
    """Independent per-episode seeds; a pure function of (master seed, episode index)."""
    words = np.random.SeedSequence([int(master_seed), int(index)]).generate_state(4, dtype=np.uint32)
    return {"task": int(words[0]), "demo": int(words[1]), "exec": int(words[2]), "adversary": int(words[3])}


@dataclass
class EpisodeResult:
    index: int
    task: dict
    demo_seed: int
    exec_seed: int
    success: bool
    termination: str
    api_calls: int
    perturbations: int = 0


@dataclass
class EvalReport:
    variant: str
    axis: str
    episodes: int
    success_rate: float
    terminations: dict
    results: list[EpisodeResult]
    config_fingerprint: str
    seed: int
    checkpoint_hash: str = ""
    label: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        d = asdict(self)
        d["results"] = [asdict(r) for r in self.results]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "EvalReport":
        d = dict(d)
        d["results"] = [EpisodeResult(**r) for r in d["results"]]
        return cls(**d)


def fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def adversary_hook(rng: np.random.Generator, prob: float, trigger: int = PICK_AND_PLACE):
    """Topple a tower with probability ``prob`` each time ``trigger`` (a program or API id) finishes.

    Hierarchical runs trigger when a pick-and-place returns, i.e. once per
    stacked block; flat runs have no sub-programs and trigger on release.
    """
    def hook(state, program):
        return apply_adversary(state, rng, prob) if program == trigger else state
    return hook


def run_episode(model: NTPModel | str, task: TaskInstance, seeds: dict, runtime: RuntimeConfig,
                adversary_prob: float = 0.0, record_trace: bool = False) -> RunResult:
    """One-shot protocol: a fresh expert demonstration is the specification, executed in a new layout."""
    spec, _, _ = demonstrate(task, seeds["demo"])
    env = reset(task, seeds["exec"])
    hook = None
    if adversary_prob > 0:
        hierarchical = model == ORACLE or model.variant.hierarchical
        hook = adversary_hook(np.random.default_rng(seeds["adversary"]), adversary_prob,
                              PICK_AND_PLACE if hierarchical else API_RELEASE)
    root = ROOT_PROGRAM[task.family]
    if model == ORACLE:
        return run(root, spec, env, OraclePolicy(plan(task)), runtime, task=task, hook=hook, record_trace=record_trace)
    return run_model(model, root, spec, env, runtime, task=task, hook=hook, record_trace=record_trace)


# ----------------------------------------------------------------------------- protocols


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("NTP_WORKERS", "1")))
    except ValueError:
        raise ConfigurationError("NTP_WORKERS must be an integer") from None


def _episode_job(args):
    model, task, seeds, runtime, adversary_prob = args
    r = run_episode(model, task, seeds, runtime, adversary_prob)
    if r.success != task.success(r.final_state):
        raise AssertionError("success flag disagrees with the task predicate")
    return r.success, r.termination.value, r.n_api_calls, r.final_state.perturbations


def evaluate(model: NTPModel | str, tasks: Sequence[TaskInstance] | DatasetSplit, n_episodes: int, seed: int, *,
             runtime: RuntimeConfig = RuntimeConfig(), adversary_prob: float = 0.0, axis: str = "",
             checkpoint_hash: str = "", label: dict | None = None,
             transform: Callable[[TaskInstance], TaskInstance] | None = None) -> EvalReport:
    """Success rate over ``n_episodes`` tasks drawn from ``tasks`` (a split's unseen set by default).

    Episodes run in ``NTP_WORKERS`` processes; seeds depend only on the
    episode index, so the worker count never changes the report.
    """
    if n_episodes < 1:
        raise ConfigurationError("n_episodes must be at least 1")
    if isinstance(tasks, DatasetSplit):
        axis = axis or tasks.axis.value
        tasks = tasks.unseen
    if not tasks:
        raise ConfigurationError("no tasks to evaluate")
    jobs = []
    for i in range(n_episodes):
        seeds = episode_seeds(seed, i)
        task = tasks[seeds["task"] % len(tasks)]
        if transform is not None:
            task = transform(task)
        jobs.append((model, task, seeds, runtime, adversary_prob))
    workers = min(_workers(), n_episodes)
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(workers) as pool:
            outcomes = list(pool.map(_episode_job, jobs, chunksize=max(1, n_episodes // (4 * workers))))
    else:
        outcomes = [_episode_job(j) for j in jobs]
    results = [EpisodeResult(i, j[1].to_json(), j[2]["demo"], j[2]["exec"], *o) for i, (j, o) in
               enumerate(zip(jobs, outcomes))]
    successes = sum(r.success for r in results)
    variant = model if isinstance(model, str) else model.variant.value
    cfg = {"variant": variant, "runtime": asdict(runtime), "adversary_prob": adversary_prob, "n": n_episodes,
           "seed": seed, "model": None if isinstance(model, str) else model.config.to_json(), "label": label or {},
           "checkpoint": checkpoint_hash}
    return EvalReport(variant, axis, n_episodes, successes / n_episodes,
                      dict(sorted(Counter(r.termination for r in results).items())), results,
                      fingerprint(cfg), seed, checkpoint_hash, dict(label or {}))


def _hash_of(model) -> str:
    if isinstance(model, str):
        return ""
    from ntp.trainer import checkpoint_text, content_hash
    return content_hash(checkpoint_text(model))


def length_sweep(models: dict, tasks: Sequence[SortingTask] | DatasetSplit, grid: Iterable[int] = range(1, 11),
                 n_episodes: int = 100, seed: int = 0, runtime: RuntimeConfig = RuntimeConfig(),
                 oracle_row: bool = True) -> list[EvalReport]:
    """Every model at every objects-per-category count; ``models`` maps a row name to a model."""
    grid = list(grid)
    if not grid:
        raise ConfigurationError("empty sweep grid")
    if isinstance(tasks, DatasetSplit):
        tasks = tasks.unseen
    rows = dict(models)
    if oracle_row:
        rows.setdefault(ORACLE, ORACLE)
    reports = []
    for name, model in rows.items():
        h = _hash_of(model)
        for k in grid:
            rep = evaluate(model, tasks, n_episodes, seed, runtime=runtime, axis="length", checkpoint_hash=h,
                           label={"model": name, "objects_per_category": k},
                           transform=lambda t, k=k: t.with_counts((k,) * len(t.counts)))
            log.info("%s k=%d success %.3f", name, k, rep.success_rate)
            reports.append(rep)
    return reports


@dataclass
class AdversarialResult:
    reports: dict  # "<name>/clean" and "<name>/adversarial" -> EvalReport
    drops: dict  # name -> clean - adversarial

    def all_reports(self) -> list[EvalReport]:
        return [self.reports[k] for k in sorted(self.reports)]


def adversarial_eval(models: dict, tasks: Sequence[TaskInstance] | DatasetSplit, prob: float = 0.25,
                     n_episodes: int = 200, seed: int = 0, runtime: RuntimeConfig = RuntimeConfig()
                     ) -> AdversarialResult:
    """Each model with and without the tower-toppling adversary on the same episodes."""
    if isinstance(tasks, DatasetSplit):
        tasks = tasks.unseen
    reports, drops = {}, {}
    for name, model in models.items():
        h = _hash_of(model)
        for arm, p in (("clean", 0.0), ("adversarial", prob)):
            reports[f"{name}/{arm}"] = evaluate(model, tasks, n_episodes, seed, runtime=runtime, adversary_prob=p,
                                                axis="adversarial", checkpoint_hash=h,
                                                label={"model": name, "arm": arm, "prob": p})
        drops[name] = reports[f"{name}/clean"].success_rate - reports[f"{name}/adversarial"].success_rate
    return AdversarialResult(reports, drops)


def cleanup_matrix(model, bowls: Iterable[int] = (1, 2, 3, 4), forks: Iterable[int] = (0, 5, 10, 20),
                   n_episodes: int = 20, seed: int = 0, runtime: RuntimeConfig = RuntimeConfig()) -> list[EvalReport]:
    """Success over the (bowls x forks) grid of table clean-up instances."""
    from ntp.taskgen import CleanupTask
    h = _hash_of(model)
    out = []
    for b in bowls:
        for f in forks:
            out.append(evaluate(model, [CleanupTask(b, f)], n_episodes, seed, runtime=runtime, axis="cleanup",
                                checkpoint_hash=h, label={"bowls": b, "forks": f}))
    return out


# ----------------------------------------------------------------------------- reports

CSV_FIELDS = ("variant", "axis", "label", "episodes", "successes", "success_rate", "terminations",
              "config_fingerprint", "checkpoint_hash", "seed")


def _csv_row(rep: EvalReport) -> dict:
    return {"variant": rep.variant, "axis": rep.axis, "label": json.dumps(rep.label, sort_keys=True),
            "episodes": rep.episodes, "successes": sum(r.success for r in rep.results),
            "success_rate": repr(rep.success_rate), "terminations": json.dumps(rep.terminations, sort_keys=True),
            "config_fingerprint": rep.config_fingerprint, "checkpoint_hash": rep.checkpoint_hash, "seed": rep.seed}


def emit_report(reports: Sequence[EvalReport], path, fmt: str | None = None) -> None:
    """Write reports as JSON (full, per-episode) or CSV (one row per report); atomic, byte-stable."""
    path = os.fspath(path)
    fmt = fmt or ("csv" if path.endswith(".csv") else "json")
    if fmt == "json":
        text = json.dumps([r.to_json() for r in reports], indent=1, sort_keys=True) + "\n"
    elif fmt == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow(_csv_row(r))
        text = buf.getvalue()
    else:
        raise ConfigurationError(f"report format {fmt!r} not in (json, csv)")
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def read_report(path) -> list[EvalReport]:
    with open(path) as fh:
        return [EvalReport.from_json(d) for d in json.load(fh)]
