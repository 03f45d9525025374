"""Stacking success on unseen goals as the number of training tasks grows, with the no-scope ablation."""
from dataclasses import replace

from _common import dump_summary, parser, setup_logging
from ntp.experiments import ResultCache, SemanticsConfig, run_semantics, write_reports

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    setup_logging()
    cfg = SemanticsConfig(seed=args.seed)
    if args.quick:
        cfg = replace(cfg, n_train_grid=(5, 10), n_unseen=5, traces_per_task=2, batches=50, episodes=4)
    result = run_semantics(cfg, ResultCache(args.results))
    write_reports(result, args.out / "semantics")
    dump_summary(result, args.out / "semantics-summary.json")
