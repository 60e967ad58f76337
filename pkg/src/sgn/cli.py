"""``sgn train|eval|verify|bench``.

Exit codes: 0 ok, 1 verification failure, 2 bad input, 3 runtime abort.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .core import Rng
from .data import Dataset, gen_gaussian_mixture, gen_two_moons, read_csv, write_csv
from .integrator import DivergenceError, FlowConfig
from .model import SgnModel, exact_log_likelihood, generate, iw_log_likelihood
from .train import EpochRecord, TrainConfig, Trainer, TrainingAborted

__all__ = ["SCHEMA_VERSION", "RunConfig", "parse_config", "save_checkpoint", "load_checkpoint", "main"]

SCHEMA_VERSION = 1
EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_ABORT = 0, 1, 2, 3

log = logging.getLogger("sgn")

_MODEL_KEYS = {"latent_half_dim", "hidden", "decoder_mode", "activation", "spectral_cap"}
_FLOW_KEYS = {f.name for f in fields(FlowConfig)}
_TRAIN_KEYS = {f.name for f in fields(TrainConfig)} - {"seed"}
_DATASET_KEYS = {
    "gaussian_mixture": {"kind", "n", "centers", "scales"},
    "two_moons": {"kind", "n", "noise"},
    "csv": {"kind", "path"},
}
_TOP_KEYS = {"schema_version", "seed", "dataset", "model", "flow", "train", "samples"}


class ConfigError(ValueError):
    pass


def _reject_unknown(section: str, given: dict, allowed: set) -> None:
    if not isinstance(given, dict):
        raise ConfigError(f"{section}: expected an object")
    extra = sorted(set(given) - allowed)
    if extra:
        raise ConfigError(f"{section}: unknown keys {extra}")


class RunConfig:
    """Validated run configuration; ``raw`` is the normalized JSON echo."""

    def __init__(self, raw: dict):
        _reject_unknown("config", raw, _TOP_KEYS)
        version = raw.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {version!r} is not supported (expected {SCHEMA_VERSION})")
        self.seed = int(raw.get("seed", 0))
        ds = dict(raw.get("dataset", {}))
        kind = ds.get("kind")
        if kind not in _DATASET_KEYS:
            raise ConfigError(f"dataset.kind must be one of {sorted(_DATASET_KEYS)}")
        _reject_unknown("dataset", ds, _DATASET_KEYS[kind])
        model = dict(raw.get("model", {}))
        _reject_unknown("model", model, _MODEL_KEYS)
        flow = dict(raw.get("flow", {}))
        _reject_unknown("flow", flow, _FLOW_KEYS)
        train = dict(raw.get("train", {}))
        _reject_unknown("train", train, _TRAIN_KEYS)
        self.samples = int(raw.get("samples", 1000))
        if self.samples < 0:
            raise ConfigError("samples must be non-negative")
        try:
            self.flow = FlowConfig(**flow)
            self.train = TrainConfig(seed=self.seed, **train)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        self.model = {"latent_half_dim": 1, "hidden": [16, 16], "decoder_mode": "gaussian", "activation": "tanh",
                      "spectral_cap": None, **model}
        self.dataset = ds
        self.raw = {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "dataset": ds,
            "model": self.model,
            "flow": flow,
            "train": train,
            "samples": self.samples,
        }

    def build_dataset(self) -> Dataset:
        ds, rng = self.dataset, Rng(self.seed).spawn(0)
        if ds["kind"] == "gaussian_mixture":
            centers = ds.get("centers", [[-2.0, 0.0], [2.0, 0.0]])
            return gen_gaussian_mixture(len(centers), centers, ds.get("scales", 0.5), int(ds.get("n", 2000)), rng)
        if ds["kind"] == "two_moons":
            return gen_two_moons(int(ds.get("n", 2000)), float(ds.get("noise", 0.05)), rng)
        return read_csv(ds["path"])

    def build_model(self, data_dim: int) -> SgnModel:
        mc = self.model
        try:
            return SgnModel.init(
                data_dim,
                int(mc["latent_half_dim"]),
                Rng(self.seed).spawn(2),
                tuple(mc["hidden"]),
                mc["decoder_mode"],
                self.flow,
                mc["activation"],
                mc["spectral_cap"],
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def parse_config(path) -> RunConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return RunConfig(raw)


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_checkpoint(path, config: RunConfig, trainer: Trainer) -> None:
    ckpt = {
        "schema_version": SCHEMA_VERSION,
        "config": config.raw,
        "epoch": trainer.epoch,
        "model": trainer.model.to_dict(),
        "trainer": trainer.state_dict(),
        "log": [r.to_dict() for r in trainer.log.records],
    }
    Path(path).write_text(_dumps(ckpt) + "\n")


def load_checkpoint(path) -> dict:
    try:
        ckpt = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from None
    version = ckpt.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"checkpoint schema_version {version!r} does not match {SCHEMA_VERSION}")
    return ckpt


def _restore(ckpt: dict) -> tuple[RunConfig, Trainer]:
    cfg = RunConfig(ckpt["config"])
    trainer = Trainer(SgnModel.from_dict(ckpt["model"]), cfg.train)
    trainer.load_state_dict(ckpt["trainer"])
    trainer.log.records = [EpochRecord(**r) for r in ckpt["log"]]
    return cfg, trainer


def _without_epochs(raw: dict) -> dict:
    out = json.loads(_dumps(raw))
    out["train"].pop("epochs", None)
    return out


def cmd_train(args) -> int:
    cfg = parse_config(args.config)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.json"
    epochs = cfg.train.epochs if args.epochs is None else args.epochs
    data = cfg.build_dataset()
    if args.resume and ckpt_path.exists():
        ckpt = load_checkpoint(ckpt_path)
        if _without_epochs(ckpt["config"]) != _without_epochs(cfg.raw):
            raise ConfigError("config differs from the checkpoint beyond train.epochs; refusing to resume")
        _, trainer = _restore(ckpt)
        trainer.cfg = cfg.train
    else:
        trainer = Trainer(cfg.build_model(data.dim), cfg.train)
    try:
        trainer.fit(data.points, until_epoch=epochs)
    except (TrainingAborted, DivergenceError) as exc:
        save_checkpoint(ckpt_path, cfg, trainer)
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    save_checkpoint(ckpt_path, cfg, trainer)
    (out / "train_log.jsonl").write_text(trainer.log.to_jsonl())
    samples = generate(trainer.model, Rng(cfg.seed).spawn(1), cfg.samples)
    write_csv(Dataset(samples.reshape(cfg.samples, trainer.model.data_dim), "samples"), out / "samples.csv")
    last = trainer.log.records[-1].elbo if trainer.log.records else float("nan")
    print(f"epochs {trainer.epoch} final_elbo {last:.6f} checkpoint {ckpt_path}")
    return EXIT_OK


def grid_mass(m: SgnModel, lo: float = -6.0, hi: float = 6.0, h: float = 0.05) -> float:
    """Riemann sum of the exact density over a square grid of cell centres."""
    if m.data_dim != 2:
        raise ValueError("grid integration is implemented for 2-D data")
    centres = np.arange(lo + h / 2, hi, h)
    X, Y = np.meshgrid(centres, centres, indexing="ij")
    pts = np.stack([X.ravel(), Y.ravel()], axis=1)
    return float(np.sum(np.exp(exact_log_likelihood(m, pts))) * h * h)


def cmd_eval(args) -> int:
    m = SgnModel.from_dict(load_checkpoint(args.checkpoint)["model"])
    if args.exact and m.decoder_mode != "exact_affine":
        raise ConfigError("--exact needs a checkpoint trained with decoder_mode 'exact_affine'")
    if args.iw is not None and m.decoder_mode != "gaussian":
        raise ConfigError("--iw needs a gaussian-decoder checkpoint")
    if args.grid and not args.exact:
        raise ConfigError("--grid is only meaningful with --exact")
    if args.data is None and not args.grid:
        raise ConfigError("a data CSV is required unless only --grid is requested")
    if args.data is not None:
        X = read_csv(args.data).points
        if X.shape[1] != m.data_dim:
            raise ConfigError(f"data has {X.shape[1]} columns, model expects {m.data_dim}")
        if args.exact:
            ll = np.atleast_1d(exact_log_likelihood(m, X)) if len(X) else np.zeros(0)
        else:
            rng = Rng(args.seed)
            ll = np.array([iw_log_likelihood(m, x, rng, args.iw) for x in X])
        writer = csv.writer(sys.stdout, lineterminator="\n")
        writer.writerow(["index", "log_likelihood"])
        for i, v in enumerate(ll):
            writer.writerow([i, format(float(v), ".17g")])
        print(f"mean {float(np.mean(ll)) if len(ll) else float('nan'):.17g}")
    if args.grid:
        print(f"grid_mass {grid_mass(m):.17g}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_all

    reports = run_all(args.profile)
    lines = "\n".join(r.to_json() for r in reports) + "\n"
    if args.output:
        Path(args.output).write_text(lines)
    else:
        sys.stdout.write(lines)
    width = max(len(r.name) for r in reports)
    for r in reports:
        print(f"{r.name:<{width}}  {'PASS' if r.passed else 'FAIL'}", file=sys.stderr)
    failed = sum(not r.passed for r in reports)
    print(f"{len(reports) - failed}/{len(reports)} checks passed", file=sys.stderr)
    return EXIT_OK if failed == 0 else EXIT_VERIFY


def _floats(text: str, kind=float):
    try:
        return [kind(v) for v in text.split(",") if v]
    except ValueError:
        raise ConfigError(f"cannot parse list {text!r}") from None


def cmd_bench(args) -> int:
    from .bench import run_bench

    rows, summary = run_bench(
        dims=_floats(args.dims, int),
        steps=_floats(args.steps, int),
        times=_floats(args.times),
        repeats=args.repeats,
        batch=args.batch,
    )
    with open(args.output, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["section", "x", "mode", "median_seconds", "peak_states"])
        for r in rows:
            w.writerow([r.section, r.x, r.mode, "" if r.seconds is None else f"{r.seconds:.6g}",
                        "" if r.peak_states is None else r.peak_states])
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sgn", description="Symplectic generative networks")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model from a JSON config")
    t.add_argument("config")
    t.add_argument("out_dir")
    t.add_argument("--resume", action="store_true", help="continue from out_dir/checkpoint.json")
    t.add_argument("--epochs", type=int, help="override train.epochs (the target epoch count)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="log-likelihood of a dataset under a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("data", nargs="?")
    mode = e.add_mutually_exclusive_group(required=True)
    mode.add_argument("--exact", action="store_true")
    mode.add_argument("--iw", type=int, metavar="S")
    e.add_argument("--grid", action="store_true", help="also integrate the exact density over [-6, 6]^2")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run the numerical property checks")
    v.add_argument("--profile", choices=("quick", "full"), default="quick")
    v.add_argument("--output", help="write JSON lines here instead of stdout")
    v.set_defaults(func=cmd_verify)

    b = sub.add_parser("bench", help="runtime and memory scaling measurements")
    b.add_argument("--dims", default="2,4,8,16")
    b.add_argument("--steps", default="10,100,1000")
    b.add_argument("--times", default="1,2,4,8")
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--batch", type=int, default=1024)
    b.add_argument("--output", default="bench.csv")
    b.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingAborted, DivergenceError, FloatingPointError) as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
