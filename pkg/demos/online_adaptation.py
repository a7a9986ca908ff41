"""Online adaptation of the bottom-up model on a shifted test sequence.

The hBME is trained on sequences whose in-plane joint angles stay near
zero and then used on a sequence shifted by 0.6 rad.  With online learning
the best particles of every frame are fed back into the experts; the
printout compares the hBME prediction error with adaptation off and on.

    python demos/online_adaptation.py [--seed 0] [--frames 300]
"""

import argparse

import numpy as np

from hybridpf import core
from hybridpf import filters as F
from hybridpf import mixture as mx
from hybridpf import pipeline as P
from hybridpf import synthbench as S


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--frames", type=int, default=300)
    ap.add_argument("--elite-fraction", type=float, default=0.05)
    args = ap.parse_args()

    spec = S.ChainSpec(ambiguity="none")
    Y, O, V = P.stack(S.training_set(spec, 32, 30, seed=0))
    latent = core.pca_fit(Y, 4)
    cb = S.build_codebook(P.stack(S.training_set(spec, 32, 30, seed=5))[1], 400, 0)
    print("training ...", flush=True)
    hbme = mx.hbme_train_arrays(S.descriptor(cb, O), core.encode(latent, Y), V,
                                mx.MixtureConfig())
    bundle = F.ModelBundle(F.RandomWalkDynamics.from_latent(latent, 0.05),
                           lambda o, Z: S.log_likelihood(spec, o, Z, latent), hbme, None,
                           lambda o: S.descriptor(cb, o), None)
    seq = S.generate_sequence(spec, args.frames, seed=10_000 + args.seed, shift=0.6)

    T = args.frames
    for on in (False, True):
        res = F.run_sequence(bundle, seq.observations, F.FilterConfig(seed=args.seed),
                             online_learning=on, elite_fraction=args.elite_fraction)
        e = P.joint_angle_error(spec, core.decode(latent, res.bu_means), seq.states)
        thirds = [np.mean(e[i * T // 3:(i + 1) * T // 3]) for i in range(3)]
        print(f"online learning {'on ' if on else 'off'}: hBME error by third "
              + " / ".join(f"{v:.2f}" for v in thirds) + " deg")


if __name__ == "__main__":
    main()
