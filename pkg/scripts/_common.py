"""Shared argument handling for the experiment scripts."""
import argparse
import json
import logging
from pathlib import Path


def parser(description: str) -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(description=description)
    ap.add_argument("--results", type=Path, default=Path("results"), help="result cache directory")
    ap.add_argument("--out", type=Path, default=Path("reports"), help="directory for JSON/CSV reports")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--quick", action="store_true", help="tiny budgets for a smoke run")
    return ap


def setup_logging() -> None:
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")


def dump_summary(result: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    summary = {k: v for k, v in result.items() if k != "reports"}
    path.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(json.dumps(summary["success"] if "success" in summary else summary, indent=1, sort_keys=True))
