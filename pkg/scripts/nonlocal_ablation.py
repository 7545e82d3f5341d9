"""Same run with and without non-local blocks, across a few seeds.

    python3 scripts/nonlocal_ablation.py --seeds 0 1 2
"""

import argparse
import copy
from pathlib import Path

from reid3d import experiment
from reid3d.config import load_run_config

ROOT = Path(__file__).resolve().parents[1]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default=str(ROOT / "configs" / "toy.json"))
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--steps", type=int)
    args = ap.parse_args()

    base = load_run_config(args.config)
    if args.steps is not None:
        base.steps = args.steps
    print("seed,variant,final10_loss,loss_ratio,rank1,map")
    for seed in args.seeds:
        cfg = copy.deepcopy(base)
        cfg.seed = seed
        for name, variant in (("nonlocal", cfg), ("plain", experiment.without_nonlocal(cfg))):
            run = experiment.run_training(variant)
            res = experiment.heldout_retrieval(run, variant)
            print(f"{seed},{name},{run.final_loss():.6f},{run.loss_ratio():.6f},{res.cmc[0]:.3f},{res.map:.3f}",
                  flush=True)


if __name__ == "__main__":
    main()
