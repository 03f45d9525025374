"""Decoded-window bounds over random label outputs and halting of random-weight models."""
from dataclasses import replace

from _common import dump_summary, parser, setup_logging
from ntp.experiments import ResultCache, TotalityConfig, run_totality

if __name__ == "__main__":
    args = parser(__doc__).parse_args()
    setup_logging()
    cfg = TotalityConfig(seed=args.seed)
    if args.quick:
        cfg = replace(cfg, n_scopes=1000, n_models=10)
    dump_summary(run_totality(cfg, ResultCache(args.results)), args.out / "totality-summary.json")
