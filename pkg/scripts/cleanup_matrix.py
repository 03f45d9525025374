"""Oracle or checkpoint success over the bowls x forks grid of the cleanup family."""
import argparse
from pathlib import Path

from ntp.evalharness import ORACLE, cleanup_matrix, emit_report
from ntp.trainer import load_checkpoint

if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--checkpoint", type=Path, help="model to evaluate (default: the expert oracle)")
    ap.add_argument("--episodes", type=int, default=20)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", type=Path, default=Path("reports/cleanup.csv"))
    args = ap.parse_args()
    model = load_checkpoint(args.checkpoint) if args.checkpoint else ORACLE
    reports = cleanup_matrix(model, n_episodes=args.episodes, seed=args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    emit_report(reports, args.out)
    for r in reports:
        print(f"bowls={r.label['bowls']} forks={r.label['forks']:<2} {r.success_rate:.2f}")
