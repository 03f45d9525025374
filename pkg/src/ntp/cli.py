"""Command-line entry point: ``ntp <subcommand> [flags]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ntp.errors import NTPError

log = logging.getLogger("ntp")

FAMILY_ALIASES = {"sorting": "object_sorting", "stacking": "block_stacking", "cleanup": "table_cleanup"}


def _family(name: str) -> str:
    return FAMILY_ALIASES.get(name, name)


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ntp", description="Neural task programming: data, training and evaluation.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="build a split and expert traces into a dataset directory")
    g.add_argument("--family", required=True, choices=sorted(FAMILY_ALIASES) + sorted(FAMILY_ALIASES.values()))
    g.add_argument("--axis", required=True, choices=["semantics", "topology", "length"])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, type=Path)
    g.add_argument("--n-train", type=int, default=None, help="seen tasks (default: 4 for sorting, 100 otherwise)")
    g.add_argument("--n-unseen", type=int, default=None)
    g.add_argument("--n-blocks", type=int, default=5)
    g.add_argument("--traces-per-task", type=int, default=1)

    t = sub.add_parser("train", help="train a model on a dataset directory")
    t.add_argument("--data", required=True, type=Path)
    t.add_argument("--config", type=Path, help="JSON file with optional 'model' and 'train' sections")
    t.add_argument("--variant", default=None, help="overrides the config's model variant")
    t.add_argument("--out", required=True, type=Path, help="checkpoint path")
    t.add_argument("--metrics", type=Path, help="per-epoch metrics CSV")

    def eval_common(p, checkpoint=True):
        if checkpoint:
            p.add_argument("--checkpoint", required=True, type=Path)
        p.add_argument("--data", required=True, type=Path)
        p.add_argument("--episodes", type=int, default=100)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=True, type=Path, help="report path (.json or .csv)")
        p.add_argument("--format", choices=["json", "csv"], default=None)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    eval_common(e)
    e.add_argument("--tasks", choices=["unseen", "seen"], default="unseen")
    e.add_argument("--adversary-prob", type=float, default=0.0)
    e.add_argument("--log-dir", type=Path, help="write per-episode API logs and traces (JSONL)")

    s = sub.add_parser("sweep", help="length sweep over objects per category")
    eval_common(s)
    s.add_argument("--baseline", action="append", default=[], type=Path, help="extra checkpoints (repeatable)")
    s.add_argument("--grid", type=_int_list, default=list(range(1, 11)))

    a = sub.add_parser("adversary", help="paired clean / adversarial evaluation")
    eval_common(a, checkpoint=False)
    a.add_argument("--ntp", required=True, type=Path)
    a.add_argument("--gru", required=True, type=Path)
    a.add_argument("--prob", type=float, default=0.25)
    a.add_argument("--tasks", choices=["unseen", "seen"], default="unseen")

    gc = sub.add_parser("grad-check", help="finite-difference check of every op and every variant's loss")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tolerance", type=float, default=1e-4)
    gc.add_argument("--all-coords", action="store_true", help="probe every loss parameter, not a sample")
    return ap


# ----------------------------------------------------------------------------- subcommands


def cmd_gen_data(args) -> int:
    from ntp.expert import REGISTRY_VERSION
    from ntp.experiments import build_examples
    from ntp.taskgen import make_splits
    from ntp.trainer import content_hash

    family = _family(args.family)
    n_train = args.n_train if args.n_train is not None else (4 if family == "object_sorting" else 100)
    split = make_splits(family, args.axis, np.random.default_rng(args.seed), n_train=n_train,
                        n_unseen=args.n_unseen, n_blocks=args.n_blocks, seed=args.seed)
    out = args.out
    (out / "splits").mkdir(parents=True, exist_ok=True)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    split.save(out / "splits" / "split.json")
    examples = build_examples(split.seen, args.traces_per_task, args.seed)
    files = {}
    for i, ex in enumerate(examples):
        name = f"traces/{i:06d}.jsonl"
        with open(out / name, "w") as fh:
            ex.to_jsonl(fh)
        files[name] = content_hash((out / name).read_bytes())
    files["splits/split.json"] = content_hash((out / "splits" / "split.json").read_bytes())
    manifest = {"family": family, "axis": args.axis, "seed": args.seed, "n_seen": len(split.seen),
                "n_unseen": len(split.unseen), "traces_per_task": args.traces_per_task, "n_traces": len(examples),
                "registry": REGISTRY_VERSION, "split_meta": split.meta, "files": dict(sorted(files.items()))}
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(examples)} traces, {len(split.seen)} seen / {len(split.unseen)} unseen tasks to {out}")
    return 0


def load_dataset(path: Path):
    from ntp.expert import TrainingExample
    from ntp.taskgen import DatasetSplit

    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise NTPError(f"{path} is not a dataset directory (no manifest.json)")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    split = DatasetSplit.load(path / "splits" / "split.json")
    examples = []
    for name in sorted(manifest["files"]):
        if name.startswith("traces/"):
            with open(path / name) as fh:
                examples.append(TrainingExample.from_jsonl(fh.read().splitlines()))
    return manifest, split, examples


def cmd_train(args) -> int:
    from ntp.model import ModelConfig, NTPModel
    from ntp.trainer import TraceDataset, TrainConfig, Trainer, save_checkpoint

    cfg = {}
    if args.config is not None:
        with open(args.config) as fh:
            cfg = json.load(fh)
        unknown = set(cfg) - {"model", "train"}
        if unknown:
            raise NTPError(f"unknown config sections {sorted(unknown)}")
    model_cfg = dict(cfg.get("model", {}))
    if args.variant:
        model_cfg["variant"] = args.variant
    train_cfg = TrainConfig.from_json(cfg.get("train", {}))
    _, split, examples = load_dataset(args.data)
    if not examples:
        raise NTPError("dataset has no traces")
    model = NTPModel(ModelConfig.from_json(model_cfg), examples[0].task.layout())
    trainer = Trainer(model, TraceDataset(examples, model, train_cfg.rest_pose_prob, train_cfg.seed), train_cfg)
    trainer.fit(metrics_path=args.metrics)
    digest = save_checkpoint(model, args.out)
    print(f"saved {model.variant.value} checkpoint {args.out} ({digest})")
    return 0


def _load(path: Path):
    from ntp.trainer import content_hash, load_checkpoint
    model = load_checkpoint(path)
    return model, content_hash(path.read_bytes())


def cmd_eval(args) -> int:
    from ntp.evalharness import emit_report, episode_seeds, evaluate, run_episode
    from ntp.interpreter import RuntimeConfig, write_trace
    from ntp.worldsim import write_api_log

    model, digest = _load(args.checkpoint)
    _, split, _ = load_dataset(args.data)
    tasks = split.unseen if args.tasks == "unseen" else split.seen
    rep = evaluate(model, tasks, args.episodes, args.seed, adversary_prob=args.adversary_prob,
                   axis=split.axis.value, checkpoint_hash=digest, label={"tasks": args.tasks})
    emit_report([rep], args.out, args.format)
    if args.log_dir is not None:
        args.log_dir.mkdir(parents=True, exist_ok=True)
        for i in range(args.episodes):
            seeds = episode_seeds(args.seed, i)
            r = run_episode(model, tasks[seeds["task"] % len(tasks)], seeds, RuntimeConfig(), args.adversary_prob,
                            record_trace=True)
            write_api_log(r.api_log, args.log_dir / f"episode-{i:05d}.api.jsonl")
            write_trace(r.trace, args.log_dir / f"episode-{i:05d}.trace.jsonl")
    print(f"success {rep.success_rate:.3f} over {rep.episodes} episodes -> {args.out}")
    return 0


def cmd_sweep(args) -> int:
    from ntp.evalharness import emit_report, length_sweep

    _, split, _ = load_dataset(args.data)
    models = {}
    for path in [args.checkpoint, *args.baseline]:
        model, _ = _load(path)
        models[f"{model.variant.value}:{path.name}"] = model
    reports = length_sweep(models, split, args.grid, args.episodes, args.seed)
    emit_report(reports, args.out, args.format)
    for r in reports:
        print(f"{r.label['model']:<30} k={r.label['objects_per_category']:<3} {r.success_rate:.3f}")
    return 0


def cmd_adversary(args) -> int:
    from ntp.evalharness import adversarial_eval, emit_report

    _, split, _ = load_dataset(args.data)
    tasks = split.unseen if args.tasks == "unseen" else split.seen
    ntp, _ = _load(args.ntp)
    gru, _ = _load(args.gru)
    res = adversarial_eval({"NTP": ntp, "NTP_GRU": gru}, tasks, args.prob, args.episodes, args.seed)
    emit_report(res.all_reports(), args.out, args.format)
    for name, drop in res.drops.items():
        print(f"{name}: clean {res.reports[name + '/clean'].success_rate:.3f} "
              f"adversarial {res.reports[name + '/adversarial'].success_rate:.3f} drop {drop:.3f}")
    return 0


def cmd_grad_check(args) -> int:
    from ntp.gradsuite import run_suite

    results = run_suite(args.seed, args.tolerance, loss_coords=None if args.all_coords else 400)
    ok = True
    for name, rep in results.items():
        ok &= rep["passed"]
        print(f"{'PASS' if rep['passed'] else 'FAIL'} {name:<28} max rel err {rep['max_rel_err']:.2e} "
              f"({rep['n_checked']} coords, {rep['n_refined']} refined)")
    return 0 if ok else 1


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "sweep": cmd_sweep,
            "adversary": cmd_adversary, "grad-check": cmd_grad_check}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (NTPError, OSError, ValueError) as exc:
        print(f"ntp {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
