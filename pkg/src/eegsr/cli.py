"""Command-line driver: preprocessing, interpolation, toy training,
dropout-sweep evaluation, and synthetic corpus generation.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .model import FlowAutoencoder, ModelConfig, ModelError, load_checkpoint, save_checkpoint
from .pipeline import (
    EPOCH_SFREQ,
    TRAIN_SCALE,
    PipelineError,
    Recording,
    preprocess_recording,
    rescale_for_training,
)
from .sampling import SamplerConfig, reconstruct
from .spline import SplineError, interpolate_epoch
from .sweep import SweepSpec, run_sweep, write_sweep_csv
from .synth import SynthSpec, synth_generate
from .training import (
    DropoutPlan,
    TrainConfig,
    TrainError,
    parse_kv_file,
    train,
)
from .zeeg import ZeegError, read_zeeg, write_zeeg

USAGE_ERROR = 1
DATA_ERROR = 2

DATA_ERRORS = (
    ZeegError,
    PipelineError,
    SplineError,
    TrainError,
    ModelError,
    FileNotFoundError,
    NotADirectoryError,
    ValueError,
)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_ERROR)


def _build_parser() -> _Parser:
    parser = _Parser(prog="eegsr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="preprocess a recording into epochs")
    p.add_argument("input")
    p.add_argument("out_dir")

    p = sub.add_parser("interpolate", help="reconstruct dropped channels")
    p.add_argument("--method", choices=["spline", "model"], required=True)
    p.add_argument(
        "--drop",
        required=True,
        help="comma-separated channel labels, or a dropout rate in (0, 1)",
    )
    p.add_argument("--ckpt", help="model checkpoint (required for --method model)")
    p.add_argument("--steps", type=int, default=50, help="Euler integration steps")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("input")
    p.add_argument("output")

    p = sub.add_parser("train-toy", help="train a small model on synthetic data")
    p.add_argument("--config", required=True, help="plain-text key = value file")
    p.add_argument("--out", required=True, help="checkpoint output path")

    p = sub.add_parser("eval", help="dropout sweep: model vs spline")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rates", default="0.2,0.5,0.75,0.9")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--corpus-seed", type=int, default=1, help="held-out corpus seed")
    p.add_argument("--n-recordings", type=int, default=17)
    p.add_argument("--n-epochs", type=int, default=10, help="epochs per sweep seed")
    p.add_argument("--n-seeds", type=int, default=20)
    p.add_argument("--steps", type=int, default=8, help="Euler integration steps")

    p = sub.add_parser("synth", help="generate a synthetic ZEEG corpus")
    p.add_argument("--spec", required=True, help="plain-text key = value file")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _cmd_preprocess(args) -> int:
    rec = read_zeeg(args.input)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    epochs, report = preprocess_recording(rec)
    for i, epoch in enumerate(epochs):
        write_zeeg(
            out_dir / f"epoch_{i:04d}.zeeg",
            Recording(epoch.samples, EPOCH_SFREQ, epoch.geometry),
        )
    (out_dir / "qc_report.txt").write_text(
        report.to_text(rec.geometry.labels) + "\n"
    )
    print(f"wrote {len(epochs)} epochs to {out_dir}")
    return 0


def _parse_drop(drop: str, rec: Recording, seed: int) -> np.ndarray:
    labels = rec.geometry.labels
    mask = np.zeros(rec.n_channels, dtype=bool)
    try:
        rate = float(drop)
    except ValueError:
        for name in drop.split(","):
            name = name.strip()
            if name not in labels:
                raise ValueError(f"channel label {name!r} not in recording")
            mask[labels.index(name)] = True
        return mask
    if not 0.0 < rate < 1.0:
        raise ValueError(f"dropout rate must lie in (0, 1), got {rate}")
    k = max(1, min(int(round(rate * rec.n_channels)), rec.n_channels - 1))
    rng = np.random.default_rng(seed)
    mask[rng.choice(rec.n_channels, size=k, replace=False)] = True
    return mask


def _cmd_interpolate(args) -> int:
    rec = read_zeeg(args.input)
    mask = _parse_drop(args.drop, rec, args.seed)
    if args.method == "spline":
        recon = interpolate_epoch(rec.samples, rec.geometry.positions, mask)
    else:
        if not args.ckpt:
            print("error: --method model requires --ckpt", file=sys.stderr)
            return USAGE_ERROR
        from .pipeline import Epoch, EPOCH_SAMPLES

        if rec.n_samples != EPOCH_SAMPLES or rec.sfreq != EPOCH_SFREQ:
            raise ValueError(
                "model interpolation expects one preprocessed epoch "
                f"({EPOCH_SAMPLES} samples at {EPOCH_SFREQ:g} Hz)"
            )
        model, _ = load_checkpoint(args.ckpt)
        epoch = Epoch(
            rec.samples * TRAIN_SCALE,
            rec.geometry,
            np.zeros(rec.n_channels, dtype=bool),
        )
        plan = DropoutPlan(mask, int(mask.sum()))
        out = reconstruct(
            model, epoch, plan, SamplerConfig(n_steps=args.steps, seed=args.seed)
        )
        recon = out.samples
    write_zeeg(args.output, Recording(recon, rec.sfreq, rec.geometry))
    print(f"reconstructed {int(mask.sum())} channels -> {args.output}")
    return 0


def _synth_spec_from_kv(raw: dict) -> SynthSpec:
    known = {f.name: f for f in fields(SynthSpec)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ValueError(f"unknown synthesis key: {key}")
        if key == "band_hz":
            kwargs[key] = tuple(float(x) for x in value.split(","))
        elif known[key].type in ("int", int):
            kwargs[key] = int(value)
        else:
            kwargs[key] = float(value)
    return SynthSpec(**kwargs)


def _corpus_epochs(spec: SynthSpec):
    epochs = []
    for rec in synth_generate(spec):
        eps, _ = preprocess_recording(rec)
        epochs.extend(eps)
    return epochs


def _cmd_train_toy(args) -> int:
    raw = parse_kv_file(args.config)
    model_keys = {f.name for f in fields(ModelConfig)}
    synth_keys = {f.name for f in fields(SynthSpec)}
    train_keys = {f.name for f in fields(TrainConfig)}
    model_kv, synth_kv, train_kv = {}, {}, {}
    for key, value in raw.items():
        if key in train_keys:
            train_kv[key] = value
        elif key in model_keys:
            model_kv[key] = value
        elif key in synth_keys:
            synth_kv[key] = value
        else:
            raise ValueError(f"unknown config key: {key}")

    def build(cls, kv):
        known = {f.name: f for f in fields(cls)}
        out = {}
        for k, v in kv.items():
            if k in ("betas", "band_hz", "rope_base"):
                out[k] = tuple(float(x) for x in v.split(","))
            elif known[k].type in ("int", int):
                out[k] = int(v)
            else:
                out[k] = float(v)
        return cls(**out)

    synth_spec = build(SynthSpec, synth_kv)
    model_cfg = build(ModelConfig, model_kv)
    train_cfg = build(TrainConfig, train_kv)

    print(f"generating corpus: {synth_spec.n_recordings} recordings", flush=True)
    epochs = rescale_for_training(_corpus_epochs(synth_spec))
    print(f"training on {len(epochs)} epochs", flush=True)
    model = FlowAutoencoder(model_cfg, seed=train_cfg.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    trace = train(model, epochs, train_cfg, out_dir=out.parent)
    save_checkpoint(
        out,
        model,
        step=train_cfg.total_steps,
        loss_history=[r["weighted_total"] for r in trace],
    )
    print(f"final loss {trace[-1]['weighted_total']:.4f} -> {out}")
    return 0


def _cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    rates = tuple(float(x) for x in args.rates.split(","))
    spec = SweepSpec(
        dropout_rates=rates,
        n_epochs=args.n_epochs,
        seeds=tuple(range(args.n_seeds)),
        methods=("model", "spline"),
    )
    synth_spec = SynthSpec(seed=args.corpus_seed, n_recordings=args.n_recordings)
    epochs = _corpus_epochs(synth_spec)
    rows = run_sweep(
        epochs, model, spec, sampler=SamplerConfig(n_steps=args.steps, seed=0)
    )
    write_sweep_csv(args.out, rows)
    for row in rows:
        print(
            f"{row['method']:6s} rate={row['rate']:.2f} "
            f"nmse={row['mean_nmse']:.4f} +/- {row['sd_nmse']:.4f} (n={row['n']})"
        )
    return 0


def _cmd_synth(args) -> int:
    spec = _synth_spec_from_kv(parse_kv_file(args.spec))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, rec in enumerate(synth_generate(spec)):
        write_zeeg(out_dir / f"rec_{i:04d}.zeeg", rec)
    print(f"wrote {spec.n_recordings} recordings to {out_dir}")
    return 0


_COMMANDS = {
    "preprocess": _cmd_preprocess,
    "interpolate": _cmd_interpolate,
    "train-toy": _cmd_train_toy,
    "eval": _cmd_eval,
    "synth": _cmd_synth,
}


def cli(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except DATA_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return DATA_ERROR


def main() -> None:
    sys.exit(cli())
