"""Command-line harness: ``python3 -m ont <command> ...``.

Exit codes: 0 success, 2 configuration / validation error, 3 runtime or data error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import network as net
from . import subsampler
from .autodiff import Tensor
from .config import ConfigError, RunConfig, describe, load_config
from .corpus import write_corpus
from .metrics import evaluate
from .signal_io import Waveform, WavFormatError, read_wav, write_wav
from .spectral import StftConfig, stft
from .subsampler import SubsampleConfig
from .training import DatasetManifest, DivergenceError, ManifestError, train

log = logging.getLogger("ont")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

ABLATE_DEFAULTS = {
    "k": ("2", "4", "6"),
    "gamma": ("0", "1", "2", "4", "10", "20", "40"),
    "sampler-mode": ("fixed", "random"),
}
# tstb counts per preset; the tiny preset scales {4, 6, 8} down to {1, 2, 3}
TSTB_COUNTS = {"paper": (4, 6, 8), "tiny": (1, 2, 3)}
PGM_FLOOR_DB = -80.0


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------- helpers


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    over = {}
    if args.seed is not None:
        over.update(train__seed=args.seed, data__seed=args.seed)
    if args.preset is not None:
        over["model__preset"] = args.preset
    cfg = cfg.with_overrides(**over)
    return replace(cfg, verify=bool(args.verify))


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from None
    return out


def _echo(cfg: RunConfig, out: Path, command: str) -> None:
    header = f"# ont {command}; verify={'true' if cfg.verify else 'false'}\n"
    (out / "config.txt").write_text(header + cfg.to_text())


def _manifest(path: str | None, cfg: RunConfig) -> DatasetManifest:
    p = path or cfg["data.manifest"]
    if not p:
        raise UsageError("no manifest given (argument or data.manifest)")
    if not Path(p).exists():
        raise FileNotFoundError(f"manifest not found: {p}")
    return DatasetManifest.load(p)


def _stft_for(cfg: RunConfig, rate: int) -> StftConfig:
    s = cfg.stft_config()
    return s if s.sample_rate_hz == rate else replace(s, sample_rate_hz=rate)


# ---------------------------------------------------------------- commands


def cmd_synth(args, cfg: RunConfig) -> int:
    out = _out_dir(args, "corpus")
    m = write_corpus(cfg.corpus_config(), out)
    _echo(cfg, out, "synth")
    print(f"wrote {len(m.items)} clips to {out} (manifest {out / 'manifest.json'})")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    tcfg = cfg.train_config()
    manifest = _manifest(args.manifest, cfg)
    out = _out_dir(args, "run")
    _echo(cfg, out, "train")
    res = train(manifest, tcfg, out, resume_from=args.resume, model_config=cfg.model_config())
    last = res.log[-1]["total"] if res.log else float("nan")
    print(f"trained {len(res.log)} steps, final total loss {last:.6g}; model {res.final_path}")
    return EXIT_OK


def cmd_denoise(args, cfg: RunConfig) -> int:
    model = net.load_model(args.model)
    if cfg.verify:
        model = net.DenoiserModel(model.config, {k: Tensor(t.data.astype(np.float64), requires_grad=True)
                                                 for k, t in model.params.items()})
    x = read_wav(args.input)
    y = net.denoise_waveform(model, x, _stft_for(cfg, x.sample_rate_hz))
    write_wav(y, args.output)
    print(f"denoised {args.input} -> {args.output} ({len(y)} samples)")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    model = net.load_model(args.model)
    manifest = _manifest(args.manifest, cfg)
    items = manifest.split(args.split)
    if not items:
        raise ManifestError(f"manifest has no '{args.split}' items")
    rate = read_wav(manifest.path(items[0].noisy)).sample_rate_hz
    rep = evaluate(model, manifest, _stft_for(cfg, rate), args.strategy, args.split,
                   with_stoi=not args.no_stoi)
    out_csv = Path(args.output)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    rep.save(out_csv, out_csv.with_suffix(".json"))
    for s, ms in rep.aggregates().items():
        print(s, "  ".join(f"{m} {a:.3f} ± {b:.3f}" for m, (a, b) in ms.items()))
    return EXIT_OK


def _ablate_cells(sweep: str, cfg: RunConfig) -> list:
    """[(column label, RunConfig)] for the sweep."""
    vals = tuple(cfg["ablate.values"])
    cells = []
    if sweep == "tstb":
        counts = tuple(int(v) for v in vals) if vals else TSTB_COUNTS.get(cfg["model.preset"], (1, 2, 3))
        for kind in ("real", "complex"):
            for n in counts:
                label = f"{n}{'c' if kind == 'complex' else 'r'}TSTB"
                cells.append((label, cfg.with_overrides(model__n_tstb=n, model__tstm_kind=kind)))
        return cells
    if sweep not in ABLATE_DEFAULTS:
        raise UsageError(f"unknown sweep {sweep!r}; choose from k, gamma, tstb, sampler-mode")
    for v in vals or ABLATE_DEFAULTS[sweep]:
        if sweep == "k":
            cells.append((f"k={v}", cfg.with_overrides(subsample__k=int(v))))
        elif sweep == "gamma":
            cells.append((f"gamma={v}", cfg.with_overrides(train__gamma=float(v))))
        else:
            if v not in ("fixed", "random"):
                raise UsageError(f"sampler mode must be fixed or random, got {v!r}")
            cells.append((v, cfg.with_overrides(subsample__mode=v)))
    return cells


def _write_table(path: Path, labels: list, table: dict) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["noise"] + labels)
        for cond in table:
            w.writerow([cond] + [repr(table[cond][l]) if l in table[cond] else "" for l in labels])


def run_ablation(sweep: str, cfg: RunConfig, manifest: DatasetManifest, out: Path, out_csv: Path,
                 with_stoi: bool = False) -> dict:
    """One train + eval per (cell, seed); table[noise condition][cell] = mean output SNR."""
    cells = _ablate_cells(sweep, cfg)
    for label, c in cells:  # validate every cell before spending time on training
        c.train_config(), c.model_config()
    seeds = tuple(cfg["ablate.seeds"])
    if not seeds:
        raise UsageError("ablate.seeds is empty")
    test = manifest.split("test")
    if not test:
        raise ManifestError("manifest has no 'test' items")
    noise_of = {it.id: it.noise for it in test}
    labels = [l for l, _ in cells]
    table: dict = {}
    runs_path = out / "runs.csv"
    with open(runs_path, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerow(["cell", "seed", "noise", "snr_db", "ssnr_db", "stoi"])
    for label, c in cells:
        per_cond: dict = {}
        for seed in seeds:
            cs = c.with_overrides(train__seed=seed)
            tcfg = cs.train_config()
            cell_dir = out / label / f"seed{seed}"
            cell_dir.mkdir(parents=True, exist_ok=True)
            _echo(cs, cell_dir, f"ablate {sweep}")
            res = train(manifest, tcfg, cell_dir, model_config=cs.model_config())
            rep = evaluate(res.model, manifest, tcfg.stft, label, "test", with_stoi, baseline=False)
            rep.save(cell_dir / "metrics.csv", cell_dir / "metrics.json")
            by_cond: dict = {}
            for r in rep.records:
                by_cond.setdefault(noise_of[r.clip], []).append(r)
            with open(runs_path, "a", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                for cond, rs in by_cond.items():
                    snr = float(np.mean([r.snr_db for r in rs]))
                    per_cond.setdefault(cond, []).append(snr)
                    w.writerow([label, seed, cond, repr(snr), repr(float(np.mean([r.ssnr_db for r in rs]))),
                                repr(float(np.mean([r.stoi for r in rs])))])
        for cond, v in per_cond.items():
            table.setdefault(cond, {})[label] = float(np.mean(v))
        _write_table(out_csv, labels, table)  # flush partial results per cell
        log.info("cell %s done", label)
    return table


def cmd_ablate(args, cfg: RunConfig) -> int:
    manifest = _manifest(args.manifest, cfg)
    if args.seeds:
        cfg = cfg.with_overrides(ablate__seeds=tuple(int(s) for s in args.seeds.split(",")))
    if args.values:
        cfg = cfg.with_overrides(ablate__values=tuple(v.strip() for v in args.values.split(",")))
    out = _out_dir(args, f"ablate_{args.sweep}")
    _echo(cfg, out, f"ablate {args.sweep}")
    out_csv = Path(args.output) if args.output else out / "table.csv"
    table = run_ablation(args.sweep, cfg, manifest, out, out_csv, with_stoi=args.stoi)
    print(out_csv.read_text(), end="")
    return EXIT_OK if table else EXIT_RUNTIME


def cmd_subsample(args, cfg: RunConfig) -> int:
    x = read_wav(args.input)
    seed = args.seed if args.seed is not None else cfg["train.seed"]
    scfg = SubsampleConfig(args.k if args.k is not None else cfg["subsample.k"],
                           args.mode or cfg["subsample.mode"], seed)
    m = subsampler.plan(len(x), scfg)
    s1, s2 = subsampler.apply(m, x)
    prefix = Path(args.out_prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    write_wav(s1, f"{prefix}_s1.wav")
    write_wav(s2, f"{prefix}_s2.wav")
    Path(f"{prefix}_map.txt").write_text(m.dump())
    print(f"{m.n_windows} windows -> {prefix}_s1.wav, {prefix}_s2.wav, {prefix}_map.txt")
    return EXIT_OK


def spectrogram_db(x: Waveform, cfg: StftConfig) -> np.ndarray:
    """dB magnitude [F, T] clamped at the -80 dB floor (re full scale 1.0)."""
    S = stft(x, cfg)
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(S.magnitude())
    return np.maximum(db, PGM_FLOOR_DB)


def to_pgm(db: np.ndarray) -> str:
    """Plain P2 greymap, low frequencies at the bottom; the floor maps to 0."""
    top = db.max()
    span = top - PGM_FLOOR_DB
    img = np.zeros_like(db) if span <= 0 else np.round(255.0 * (db - PGM_FLOOR_DB) / span)
    img = img.astype(int)[::-1]
    F, T = db.shape
    rows = "\n".join(" ".join(str(v) for v in row) for row in img)
    return f"P2\n{T} {F}\n255\n{rows}\n"


def cmd_spectrogram(args, cfg: RunConfig) -> int:
    x = read_wav(args.input)
    db = spectrogram_db(x, _stft_for(cfg, x.sample_rate_hz))
    Path(args.output).write_text(to_pgm(db))
    if args.csv:
        np.savetxt(args.csv, db, delimiter=",", fmt="%.6f")
    print(f"{db.shape[0]}x{db.shape[1]} spectrogram -> {args.output}")
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    from .gradcheck import DEFAULT_FLOOR, run_gradcheck

    seed = args.seed if args.seed is not None else 0
    res = run_gradcheck(seed=seed, max_coords=args.coords, floor=DEFAULT_FLOOR)
    name, idx, a, n, rel = res.worst
    print(f"checked {res.n_checked} coordinates in {res.seconds:.1f}s; "
          f"max relative error {res.max_rel_error:.3e} ({name}[{idx}]: analytic {a:.6e}, numeric {n:.6e})")
    if args.out:
        out = _out_dir(args, "gradcheck")
        (out / "gradcheck.json").write_text(json.dumps(
            {"n_checked": res.n_checked, "max_rel_error": res.max_rel_error, "per_param": res.per_param},
            indent=1, sort_keys=True) + "\n")
    return EXIT_OK if res.max_rel_error <= args.tol else EXIT_RUNTIME


# ---------------------------------------------------------------- parser


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    # accepted before or after the subcommand; the subcommand copy must not
    # overwrite values given before it, hence SUPPRESS defaults there
    g = argparse.ArgumentParser(add_help=False)
    d = {"default": argparse.SUPPRESS} if suppress else {}
    g.add_argument("--config", help="key = value config file", **d)
    g.add_argument("--seed", type=int, help="overrides train.seed and data.seed", **d)
    g.add_argument("--preset", choices=sorted(net.PRESETS), **d)
    g.add_argument("--out", help="output directory", **d)
    g.add_argument("--verify", action="store_true", help="float64 deterministic mode", **d)
    g.add_argument("-v", "--verbose", action="store_true", **d)
    return g


def build_parser() -> argparse.ArgumentParser:
    glob = _global_flags(suppress=True)
    p = argparse.ArgumentParser(prog="ont", description="Only-noisy-training speech denoiser harness",
                                parents=[_global_flags(suppress=False)])
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[glob], help="write a synthetic toy corpus")

    s = sub.add_parser("train", parents=[glob], help="train a model")
    s.add_argument("manifest", nargs="?")
    s.add_argument("--resume", help="checkpoint prefix to resume from")

    s = sub.add_parser("denoise", parents=[glob], help="denoise one WAV")
    s.add_argument("model")
    s.add_argument("input")
    s.add_argument("output")

    s = sub.add_parser("eval", parents=[glob], help="evaluate a model on the test split")
    s.add_argument("model")
    s.add_argument("manifest")
    s.add_argument("output", help="CSV path; a JSON mirror is written beside it")
    s.add_argument("--strategy", default="model", help="label for the model rows")
    s.add_argument("--split", default="test")
    s.add_argument("--no-stoi", action="store_true")

    s = sub.add_parser("ablate", parents=[glob], help="ablation sweep")
    s.add_argument("sweep", choices=("k", "gamma", "tstb", "sampler-mode"))
    s.add_argument("manifest", nargs="?")
    s.add_argument("output", nargs="?", help="table CSV (default OUT/table.csv)")
    s.add_argument("--seeds", help="comma-separated repetition seeds")
    s.add_argument("--values", help="comma-separated sweep values")
    s.add_argument("--stoi", action="store_true", help="also compute STOI per run")

    s = sub.add_parser("subsample", parents=[glob], help="emit the two sub-sampled signals and the map")
    s.add_argument("input")
    s.add_argument("out_prefix")
    s.add_argument("--k", type=int)
    s.add_argument("--mode", choices=("random", "fixed"))

    s = sub.add_parser("spectrogram", parents=[glob], help="PGM spectrogram image")
    s.add_argument("input")
    s.add_argument("output")
    s.add_argument("--csv", help="also write the dB matrix as CSV")

    s = sub.add_parser("gradcheck", parents=[glob], help="finite-difference gradient check")
    s.add_argument("--coords", type=int, default=0, help="coordinates per tensor (0 = all)")
    s.add_argument("--tol", type=float, default=1e-4)

    sub.add_parser("config", parents=[glob], help="print every config key with its default")
    return p


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "denoise": cmd_denoise, "eval": cmd_eval,
    "ablate": cmd_ablate, "subsample": cmd_subsample, "spectrogram": cmd_spectrogram,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "config":
        print(describe(), end="")
        return EXIT_OK
    try:
        cfg = _run_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, ManifestError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, DivergenceError, net.ModelFormatError, WavFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        # dataclass validation of user-provided values (k, mode, SNR, ...)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
