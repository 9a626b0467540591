"""Estimate task similarity on the default synthetic generator and compare groups with the planted clusters.

    python scripts/recover_groups.py [--seeds 0 1 2] [--tune-subset 64]
"""

import argparse
import tempfile
from pathlib import Path

import numpy as np

from tglora import harness
from tglora.config import config_from_dict
from tglora.grouping import best_partition
from tglora.tree import canonical


def main() -> None:
    p = argparse.ArgumentParser()
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--tune-subset", type=int, help="training examples used to tune the heads")
    p.add_argument("--n-examples", type=int, help="examples averaged in the similarity estimate")
    args = p.parse_args()
    sim_cfg = {k: v for k, v in (("tune_subset", args.tune_subset), ("n_examples", args.n_examples)) if v}
    cfg = config_from_dict({"similarity": sim_cfg})
    hits = 0
    with tempfile.TemporaryDirectory() as tmp:
        for seed in args.seeds:
            run = harness.Run.resolve(cfg, seed, Path(tmp) / str(seed))
            gen = run.generator()
            truth = canonical([[t for t in range(gen.task_count) if gen.clusters[t] == c] for c in set(gen.clusters)])
            data = harness.gen_data(run)
            harness.tune_heads_step(run, data)
            sim = harness.similarity_step(run, data)
            found = best_partition(sim, len(truth))
            tree = harness.group_step(run).tree
            hits += found == truth
            print(f"seed {seed}: truth {truth} found {found} tree {[list(map(list, s)) for s in tree.stages]}")
            print(np.array2string(sim.values, precision=3, suppress_small=True))
    print(f"recovered {hits}/{len(args.seeds)}")


if __name__ == "__main__":
    main()
