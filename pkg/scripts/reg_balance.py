"""How large is the regularizer next to the basic loss, and what does γ do to held-out SNR?

Prints per-step loss magnitudes for one short run, then trains γ = 0, γ = 1 and
γ = 1 with the length-normalized regularizer over a few seeds.

    python3 scripts/reg_balance.py --seeds 0,1,2
"""
import argparse
from pathlib import Path

import numpy as np

from ont.corpus import CorpusConfig, write_corpus
from ont.losses import LossWeights
from ont.metrics import evaluate
from ont.training import TrainConfig, train

CELLS = {
    "gamma=0": LossWeights(gamma=0.0),
    "gamma=1": LossWeights(gamma=1.0),
    "gamma=1 normalized": LossWeights(gamma=1.0, reg_normalized=True),
}


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/reg_balance")
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--n-clips", type=int, default=48)
    args = ap.parse_args()

    out = Path(args.out)
    manifest = write_corpus(CorpusConfig(n_clips=args.n_clips), out / "corpus")

    log = train(manifest, TrainConfig(epochs=1)).log
    for key in ("l_basic", "l_reg"):
        v = np.array([r[key] for r in log])
        print(f"{key:8s} first {v[0]:9.4f}  median {np.median(v):9.4f}  last {v[-1]:9.4f}")

    seeds = [int(s) for s in args.seeds.split(",")]
    for name, w in CELLS.items():
        snr = []
        for seed in seeds:
            cfg = TrainConfig(seed=seed, weights=w)
            res = train(manifest, cfg)
            rep = evaluate(res.model, manifest, cfg.stft, "m", with_stoi=False, baseline=False)
            snr.append(rep.aggregates()["m"]["snr_db"][0])
        print(f"{name:20s} {np.mean(snr):6.2f} dB  ", " ".join(f"{v:.2f}" for v in snr), flush=True)


if __name__ == "__main__":
    main()
