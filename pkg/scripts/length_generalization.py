"""NTP vs Flat on sorting with more objects per category than seen in training."""
from dataclasses import replace

from _common import dump_summary, parser, setup_logging
from ntp.experiments import LengthConfig, ResultCache, run_length, write_reports

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    setup_logging()
    cfg = LengthConfig(seed=args.seed)
    if args.quick:
        cfg = replace(cfg, traces_per_task=5, batches=50, episodes=4, grid=(1, 4))
    result = run_length(cfg, ResultCache(args.results))
    write_reports(result, args.out / "length")
    dump_summary(result, args.out / "length-summary.json")
