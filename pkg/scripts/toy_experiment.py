"""Toy end-to-end run: synthesize the corpus, train each strategy, report SNR / SSNR / STOI.

    python3 scripts/toy_experiment.py --out runs/toy --seeds 0,1,2,3,4
"""
import argparse
from pathlib import Path

from ont.corpus import CorpusConfig, write_corpus
from ont.metrics import MetricsReport, evaluate
from ont.training import TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/toy")
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--strategies", default="ONT,NCT,NNT,NerNT")
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--corpus-seed", type=int, default=0)
    args = ap.parse_args()

    out = Path(args.out)
    manifest = write_corpus(CorpusConfig(seed=args.corpus_seed), out / "corpus")
    records = []
    for strategy in args.strategies.split(","):
        for seed in (int(s) for s in args.seeds.split(",")):
            cfg = TrainConfig(strategy=strategy, epochs=args.epochs, seed=seed)
            res = train(manifest, cfg, out / strategy / f"seed{seed}")
            rep = evaluate(res.model, manifest, cfg.stft, strategy, baseline=not records)
            records += rep.records
            print(f"{strategy} seed {seed}: {rep.aggregates()[strategy]['snr_db'][0]:.2f} dB", flush=True)
    report = MetricsReport(records)
    report.save(out / "metrics.csv", out / "metrics.json")
    for s, ms in report.aggregates().items():
        print(f"{s:6s}", "  ".join(f"{m} {a:7.3f} ± {b:.3f}" for m, (a, b) in ms.items()))


if __name__ == "__main__":
    main()
