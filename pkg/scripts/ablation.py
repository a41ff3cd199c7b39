"""Run one ablation sweep on a fresh toy corpus and print the table.

    python3 scripts/ablation.py gamma --seeds 0,1,2,3,4
    python3 scripts/ablation.py sampler-mode
"""
import argparse
from pathlib import Path

from ont.cli import run_ablation
from ont.config import RunConfig
from ont.corpus import write_corpus


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("sweep", choices=("k", "gamma", "tstb", "sampler-mode"))
    ap.add_argument("--out", default=None)
    ap.add_argument("--seeds", default="0,1,2,3,4")
    ap.add_argument("--values", default="")
    args = ap.parse_args()

    out = Path(args.out or f"runs/ablate_{args.sweep}")
    out.mkdir(parents=True, exist_ok=True)
    cfg = RunConfig().with_overrides(
        ablate__seeds=tuple(int(s) for s in args.seeds.split(",")),
        ablate__values=tuple(v for v in args.values.split(",") if v))
    manifest = write_corpus(cfg.corpus_config(), out / "corpus")
    run_ablation(args.sweep, cfg, manifest, out, out / "table.csv")
    print((out / "table.csv").read_text(), end="")


if __name__ == "__main__":
    main()
