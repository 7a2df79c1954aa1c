"""Run the desk-scale experiment once and write a JSON report.

    python scripts/run_desk_experiment.py --out desk_report.json [--seed 0] [--n-scenes 500]
"""

import argparse
import json
import logging

from deepcontext.experiment import DeskExperimentConfig, criterion_checks, desk_train_config, run_desk_experiment


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="desk_report.json", help="report path")
    ap.add_argument("--seed", type=int, default=0, help="master seed")
    ap.add_argument("--n-scenes", type=int, default=500, help="scenes to generate")
    ap.add_argument("--work", default=None, help="keep intermediate data here")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    logging.getLogger("deepcontext.hybrid_synth").setLevel(logging.ERROR)
    cfg = DeskExperimentConfig(n_scenes=args.n_scenes, seed=args.seed, train=desk_train_config(args.seed))
    res = run_desk_experiment(cfg, args.work)
    checks = criterion_checks(res["report"], res["timings"]["total"])
    out = {"config": cfg.to_dict(), "report": res["report"].to_dict(), "digests": res["digests"],
           "timings": res["timings"], "splits": res["splits"],
           "checks": {k: {"value": v, "threshold": t, "passed": bool(p)} for k, (v, t, p) in checks.items()}}
    with open(args.out, "w") as f:
        json.dump(out, f, indent=1)
    for k, (v, t, p) in checks.items():
        print(f"{'PASS' if p else 'FAIL'} {k}: {v} (target {t})")


if __name__ == "__main__":
    main()
