"""Clean vs perturbed stacking for the reactive and GRU cores."""
from dataclasses import replace

from _common import dump_summary, parser, setup_logging
from ntp.experiments import AdversarialConfig, ResultCache, run_adversarial, write_reports

if __name__ == "__main__":
    ap = parser(__doc__)
    ap.add_argument("--prob", type=float, default=0.25)
    args = ap.parse_args()
    setup_logging()
    cfg = AdversarialConfig(seed=args.seed, prob=args.prob)
    if args.quick:
        cfg = replace(cfg, n_train=5, n_unseen=5, traces_per_task=2, batches=50, episodes=4)
    result = run_adversarial(cfg, ResultCache(args.results))
    write_reports(result, args.out / "adversarial")
    dump_summary(result, args.out / "adversarial-summary.json")
