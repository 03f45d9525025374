"""Desk-scale experiment drivers with an on-disk result cache.

Each driver is a pure function of its config: datasets, initialisation,
curriculum and evaluation seeds are all derived from the config's seed, so
a cached result can be reused whenever the config and the package source
are unchanged.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ntp.evalharness import (EvalReport, adversarial_eval, emit_report, evaluate, fingerprint, length_sweep)
from ntp.expert import ROOT_PROGRAM, demonstrate, training_example
from ntp.interpreter import RuntimeConfig, run_model
from ntp.model import ModelConfig, NTPModel, Variant, decode_scope
from ntp.taskgen import DatasetSplit, Family, make_splits, sample_task
from ntp.trainer import TraceDataset, TrainConfig, Trainer, load_checkpoint, save_checkpoint
from ntp.worldsim import reset

log = logging.getLogger(__name__)

PACKAGE_DIR = Path(__file__).resolve().parent


def source_hash() -> str:
    """Digest of the package sources; part of every cache key."""
    h = hashlib.sha256()
    for p in sorted(PACKAGE_DIR.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()[:16]


def derive_seed(*parts) -> int:
    words = [int(p) if isinstance(p, (int, np.integer)) else int.from_bytes(
        hashlib.sha256(str(p).encode()).digest()[:4], "little") for p in parts]
    return int(np.random.SeedSequence(words).generate_state(1, dtype=np.uint32)[0])


def build_examples(tasks, traces_per_task: int, seed: int):
    """``traces_per_task`` expert traces per task, each with its own demo and execution layout."""
    out = []
    for i, task in enumerate(tasks):
        for k in range(traces_per_task):
            out.append(training_example(task, derive_seed(seed, i, k, "demo"), derive_seed(seed, i, k, "exec")))
    return out


def train_variant(variant: str, examples, layout, batches: int, seed: int, model_overrides: dict | None = None,
                  lr: float = 1e-3, batch_size: int = 64) -> tuple[NTPModel, list[dict]]:
    model = NTPModel(ModelConfig(variant=variant, init_seed=derive_seed(seed, variant, "init"),
                                 **(model_overrides or {})), layout)
    cfg = TrainConfig(lr=lr, batch_size=batch_size, batches_per_epoch=min(250, batches),
                      seed=derive_seed(seed, variant, "train"))
    trainer = Trainer(model, TraceDataset(examples, model, cfg.rest_pose_prob, cfg.seed), cfg)
    epochs = max(1, batches // cfg.batches_per_epoch)
    history = trainer.fit(epochs)
    return model, history


class ResultCache:
    """Directory of ``<key>.json`` results and ``<key>-<name>.ckpt`` checkpoints."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def key(self, kind: str, config: dict) -> str:
        return f"{kind}-{fingerprint({'config': config, 'source': source_hash()})}"

    def load(self, key: str):
        p = self.root / f"{key}.json"
        if p.exists():
            with open(p) as fh:
                return json.load(fh)
        return None

    def store(self, key: str, value: dict) -> None:
        tmp = self.root / f"{key}.json.tmp"
        with open(tmp, "w") as fh:
            json.dump(value, fh, indent=1, sort_keys=True)
        os.replace(tmp, self.root / f"{key}.json")

    def model(self, key: str, name: str, build):
        """Load the cached checkpoint ``name`` or build, save and return it."""
        p = self.root / f"{key}-{name}.ckpt"
        if p.exists():
            return load_checkpoint(p)
        model = build()
        save_checkpoint(model, p)
        return model


# ----------------------------------------------------------------------------- experiment configs


@dataclass
class LengthConfig:
    seed: int = 0
    traces_per_task: int = 100  # per cover task; each trace draws its own 1..train_max_count counts
    train_max_count: int = 4
    grid: tuple = (1, 4, 7, 10)
    episodes: int = 100
    batches: int = 1500
    variants: tuple = ("NTP", "Flat")


@dataclass
class SemanticsConfig:
    seed: int = 0
    n_blocks: int = 5
    n_train_grid: tuple = (10, 50, 100)
    n_unseen: int = 100
    traces_per_task: int = 50
    episodes: int = 100
    batches: int = 2000
    variants: tuple = ("NTP",)
    ablation_variant: str = "NTP_NoScope"  # trained only at the largest n_train


@dataclass
class AdversarialConfig:
    seed: int = 0
    n_blocks: int = 5
    n_train: int = 100
    n_unseen: int = 100
    traces_per_task: int = 50
    prob: float = 0.25
    episodes: int = 200
    batches: int = 2000
    variants: tuple = ("NTP", "NTP_GRU")


@dataclass
class TotalityConfig:
    seed: int = 0
    n_scopes: int = 100_000
    max_window: int = 40
    n_models: int = 1000
    n_blocks: int = 5


def _reports_json(reports) -> list[dict]:
    return [r.to_json() for r in reports]


def run_length(cfg: LengthConfig, cache: ResultCache) -> dict:
    key = cache.key("length", asdict(cfg))
    hit = cache.load(key)
    if hit is not None:
        return hit
    started = time.perf_counter()
    rng = np.random.default_rng(derive_seed(cfg.seed, "length-split"))
    split = make_splits("object_sorting", "length", rng, n_train=4 * cfg.traces_per_task,
                        train_max_count=cfg.train_max_count)
    examples = build_examples(split.seen, 1, derive_seed(cfg.seed, "length-data"))
    layout = split.seen[0].layout()
    models = {v: cache.model(key, v, lambda v=v: train_variant(v, examples, layout, cfg.batches, cfg.seed)[0])
              for v in cfg.variants}
    reports = length_sweep(models, split, cfg.grid, cfg.episodes, derive_seed(cfg.seed, "length-eval"))
    table = {}
    for r in reports:
        table.setdefault(r.label["model"], {})[str(r.label["objects_per_category"])] = r.success_rate
    out = {"config": asdict(cfg), "success": table, "reports": _reports_json(reports),
           "wall_seconds": round(time.perf_counter() - started, 1)}
    cache.store(key, out)
    return out


def _stacking_split(seed: int, n_blocks: int, n_train: int, n_unseen: int) -> DatasetSplit:
    # one rng stream per seed: splits nest across n_train and share the held-out goals
    return make_splits("block_stacking", "semantics", np.random.default_rng(derive_seed(seed, "stack-split")),
                       n_train=n_train, n_unseen=n_unseen, n_blocks=n_blocks)


def _stack_model(cache: ResultCache, variant: str, seed: int, n_blocks: int, n_train: int, n_unseen: int,
                 traces_per_task: int, batches: int):
    """Stacking checkpoint keyed by its training inputs only, so experiments share models."""
    key = cache.key("stack-model", {"variant": variant, "seed": seed, "n_blocks": n_blocks, "n_train": n_train,
                                    "n_unseen": n_unseen, "traces_per_task": traces_per_task, "batches": batches})
    split = _stacking_split(seed, n_blocks, n_train, n_unseen)

    def build():
        examples = build_examples(split.seen, traces_per_task, derive_seed(seed, "stack-data"))
        return train_variant(variant, examples, split.seen[0].layout(), batches, seed)[0]

    return split, cache.model(key, variant, build)


def run_semantics(cfg: SemanticsConfig, cache: ResultCache) -> dict:
    key = cache.key("semantics", asdict(cfg))
    hit = cache.load(key)
    if hit is not None:
        return hit
    eval_seed = derive_seed(cfg.seed, "semantics-eval")
    table, reports = {}, []
    top = max(cfg.n_train_grid)
    for n_train in cfg.n_train_grid:
        variants = list(cfg.variants) + ([cfg.ablation_variant] if n_train == top and cfg.ablation_variant else [])
        for v in variants:
            split, model = _stack_model(cache, v, cfg.seed, cfg.n_blocks, n_train, cfg.n_unseen,
                                        cfg.traces_per_task, cfg.batches)
            for which, tasks in (("unseen", split.unseen), ("seen", split.seen)):
                rep = evaluate(model, tasks, cfg.episodes, eval_seed, axis="semantics",
                               label={"model": v, "n_train": n_train, "tasks": which})
                reports.append(rep)
                table.setdefault(v, {}).setdefault(str(n_train), {})[which] = rep.success_rate
                log.info("%s n_train=%d %s %.3f", v, n_train, which, rep.success_rate)
    out = {"config": asdict(cfg), "success": table, "reports": _reports_json(reports)}
    cache.store(key, out)
    return out


def run_adversarial(cfg: AdversarialConfig, cache: ResultCache) -> dict:
    key = cache.key("adversarial", asdict(cfg))
    hit = cache.load(key)
    if hit is not None:
        return hit
    models = {}
    for v in cfg.variants:
        split, models[v] = _stack_model(cache, v, cfg.seed, cfg.n_blocks, cfg.n_train, cfg.n_unseen,
                                        cfg.traces_per_task, cfg.batches)
    res = adversarial_eval(models, split.unseen, cfg.prob, cfg.episodes, derive_seed(cfg.seed, "adv-eval"))
    rates = {k: r.success_rate for k, r in res.reports.items()}
    out = {"config": asdict(cfg), "success": rates, "drops": res.drops,
           "reports": _reports_json(res.all_reports())}
    cache.store(key, out)
    return out


def _random_label_probs(rng: np.random.Generator, n: int) -> np.ndarray:
    """Softmax rows from logits of random scale; a coarse grid forces ties and saturates some rows."""
    logits = rng.normal(size=(n, 4)) * 10.0 ** rng.uniform(-3, 3)
    if rng.random() < 0.3:
        logits = np.round(logits)
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def run_totality(cfg: TotalityConfig, cache: ResultCache) -> dict:
    """Decoded-window bounds over random label outputs, and halting of random-weight models."""
    key = cache.key("totality", asdict(cfg))
    hit = cache.load(key)
    if hit is not None:
        return hit
    rng = np.random.default_rng(derive_seed(cfg.seed, "scopes"))
    bad_scopes = 0
    for _ in range(cfg.n_scopes):
        n = int(rng.integers(1, cfg.max_window + 1))
        st, ed = decode_scope(_random_label_probs(rng, n))
        bad_scopes += not (1 <= st <= ed <= n)
    runtime = RuntimeConfig()
    terminations: dict[str, int] = {}
    bad_runs = 0
    variants, families = list(Variant), list(Family)
    for i in range(cfg.n_models):
        r_seed = derive_seed(cfg.seed, "model", i)
        task = sample_task(families[i % len(families)], np.random.default_rng(r_seed), n_blocks=cfg.n_blocks)
        model = NTPModel(ModelConfig(variant=variants[i % len(variants)], init_seed=r_seed), task.layout())
        spec, _, _ = demonstrate(task, r_seed)
        r = run_model(model, ROOT_PROGRAM[task.family], spec, reset(task, r_seed + 1), runtime, task=task)
        windows_ok = all(1 <= n.window[0] <= n.window[1] <= len(spec) for n in r.call_tree.walk())
        bad_runs += not (windows_ok and r.n_api_calls <= runtime.max_api_calls)
        terminations[r.termination.value] = terminations.get(r.termination.value, 0) + 1
    out = {"config": asdict(cfg), "scope_violations": bad_scopes, "run_violations": bad_runs,
           "terminations": dict(sorted(terminations.items())), "runtime": asdict(runtime)}
    cache.store(key, out)
    return out


def write_reports(result: dict, stem) -> None:
    """``<stem>.json`` and ``<stem>.csv`` for a driver result."""
    reports = [EvalReport.from_json(d) for d in result["reports"]]
    emit_report(reports, f"{stem}.json", "json")
    emit_report(reports, f"{stem}.csv", "csv")
