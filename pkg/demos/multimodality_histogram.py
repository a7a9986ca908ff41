"""Dataset multimodality of the chain benchmark with and without depth ambiguity.

Clusters raw observations and joint angles, builds the association tables
and prints the weighted histogram over the number of distinct pose
clusters per observation cluster.

    python demos/multimodality_histogram.py [--k 100]
"""

import argparse

from hybridpf import multimodality as mm
from hybridpf import pipeline as P
from hybridpf import synthbench as S


def histogram_for(ambiguity: str, k: int):
    seqs = S.training_set(S.ChainSpec(ambiguity=ambiguity), 20, 100, seed=0)
    Y, O, _ = P.stack(seqs)
    tables = mm.build_associations(O, Y, mm.kmeans_fit(O, k, 0), mm.kmeans_fit(Y, k, 0))
    return mm.histogram(tables)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--k", type=int, default=100, help="clusters for inputs and outputs")
    args = ap.parse_args()
    for amb in ("none", "depth_sign"):
        h = histogram_for(amb, args.k)
        print(f"{amb}: mass at n=1 {h.bins.get(1, 0.0) / h.total:.3f}, "
              f"n>=2 {h.mass_at_least(2) / h.total:.3f}")
        for n, w in h.bins.items():
            print(f"  n={n:<3d} {'#' * int(60 * w / h.total)}")


if __name__ == "__main__":
    main()
