"""Command-line entry point: ``hybridbnn {generate-data,train,predict,compare,gradcheck}``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hybridbnn import data, gradcheck, presets, training
from hybridbnn.kernels import KERNELS
from hybridbnn.numerics import NotPositiveDefinite

logger = logging.getLogger("hybridbnn")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
PREDICTION_HEADER = ["x", "pred_mean", "pred_var", "lo95", "hi95"]
STATE_FILE = "model_state.npz"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    preset: str = "hfbnn"
    kernel: str | None = None
    kernel_params: dict = field(default_factory=dict)
    num_inducing: int = 20
    whiten: bool = False
    epochs: int = 500
    lr: float | None = None
    batch_size: int | None = 32
    seed: int = 0
    data: str = "gen"
    data_n: int = 200
    data_seed: int = 1
    out: str = "runs"
    mc_samples: int = 256
    grid: tuple | None = None
    presets: list = field(default_factory=lambda: list(presets.PRESETS))

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - names)
        if unknown:
            raise ConfigError(f"unknown config fields: {unknown}")
        return cls(**raw)

    def validate(self) -> "RunConfig":
        for name in [self.preset, *self.presets]:
            if name not in presets.PRESETS:
                raise ConfigError(f"unknown preset {name!r}; choose from {list(presets.PRESETS)}")
        if self.kernel is not None and self.kernel not in KERNELS:
            raise ConfigError(f"unknown kernel {self.kernel!r}; choose from {sorted(KERNELS)}")
        if self.num_inducing < 1:
            raise ConfigError("num_inducing must be positive")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.lr is not None and self.lr < 0:
            raise ConfigError("lr must be nonnegative")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.mc_samples < 1:
            raise ConfigError("mc_samples must be positive")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must fit in 64 bits")
        if self.data != "gen" and not Path(self.data).is_file():
            raise ConfigError(f"data file {self.data!r} not found")
        if self.data == "gen" and self.data_n < 10:
            raise ConfigError("data_n must be at least 10")
        if self.grid is not None:
            self.grid = parse_grid(self.grid)
        return self

    def train_config(self) -> training.TrainConfig:
        return training.TrainConfig(epochs=self.epochs, lr=self.lr, batch_size=self.batch_size,
                                    seed=self.seed, mc_samples_predict=self.mc_samples)


def parse_grid(grid) -> tuple[float, float, int]:
    if isinstance(grid, str):
        grid = grid.split(",")
    try:
        lo, hi, count = grid
        lo, hi, count = float(lo), float(hi), int(count)
    except (TypeError, ValueError):
        raise ConfigError(f"grid must be 'min,max,count', got {grid!r}") from None
    if count < 0:
        raise ConfigError("grid count must be nonnegative")
    return lo, hi, count


def load_data(cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    if cfg.data == "gen":
        return data.generate(cfg.data_n, cfg.data_seed)
    x, y = data.read_dataset(cfg.data)
    if x.size == 0:
        raise ConfigError(f"{cfg.data}: no data rows")
    return x, y


def build_model(cfg: RunConfig, preset: str, x: np.ndarray) -> training.Model:
    model = presets.build(preset, x[:, None], seed=cfg.seed, kernel=cfg.kernel,
                          kernel_params=cfg.kernel_params, num_inducing=cfg.num_inducing)
    for layer in model.gp_layers:
        if cfg.whiten and not layer.whiten:
            _whiten(layer)
    return model


def _whiten(layer) -> None:
    mean, covs = layer.q_mean(), [layer.q_cov(p) for p in range(layer.num_latent)]
    layer.whiten = True
    layer.set_q(mean, covs)


def save_state(model: training.Model, path: Path) -> None:
    arrays = {f"p{i:03d}_{p.name}": p.value for i, p in enumerate(model.parameters())}
    np.savez(path, **arrays)


def load_state(model: training.Model, path: Path) -> None:
    with np.load(path) as saved:
        keys = sorted(saved.files)
        params = model.parameters()
        if len(keys) != len(params):
            raise ConfigError(f"{path}: parameter count does not match the model")
        for key, p in zip(keys, params):
            p.assign(saved[key])


def _json_number(v):
    return v if v is None or np.isfinite(v) else None


def train_one(cfg: RunConfig, preset: str, x, y, out_dir: Path) -> dict:
    """Train ``preset`` and write its summary, loss trace and parameter state into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model(cfg, preset, x)
    report = training.fit(model, x[:, None], y, cfg.train_config())
    data.write_csv(out_dir / "loss_trace.csv", ["epoch", "loss"],
                   [list(range(1, len(report.loss_trace) + 1)), report.loss_trace])
    save_state(model, out_dir / STATE_FILE)
    summary = {
        "preset": preset,
        "config": dataclasses.asdict(cfg) | {"preset": preset},
        "seed": cfg.seed,
        "lr": report.lr,
        "num_data": int(x.size),
        "x_min": float(x.min()),
        "x_max": float(x.max()),
        "layers": model.describe(),
        "likelihood": None if model.likelihood is None else model.likelihood.describe(),
        "final_loss": report.final_loss,
        "metrics": {k: _json_number(v) for k, v in report.metrics.items()},
        "seconds": report.seconds,
        "max_jitter": report.max_jitter,
        "variance_clips": report.variance_clips,
    }
    (out_dir / "model_summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    logger.info("%s: final loss %.6g, metrics %s", preset, report.final_loss, report.metrics)
    return summary | {"_model": model}


def write_predictions(model: training.Model, cfg: RunConfig, grid, path: Path) -> None:
    lo, hi, count = grid
    xs = np.linspace(lo, hi, count)
    pred = training.predict(model, xs[:, None], cfg.train_config())
    data.write_csv(path, PREDICTION_HEADER, [xs, pred["mean"], pred["variance"], pred["lo95"], pred["hi95"]])


def default_grid(x_min: float, x_max: float) -> tuple[float, float, int]:
    span = x_max - x_min
    return x_min - 0.5 * span, x_max + 0.5 * span, 200


def cmd_generate_data(args) -> int:
    if args.n < 10:
        raise ConfigError("n must be at least 10")
    x, y = data.generate(args.n, args.seed)
    out = Path(args.out)
    try:
        data.write_dataset(out, x, y)
    except OSError as exc:
        raise ConfigError(f"cannot write {out}: {exc}") from None
    logger.info("wrote %d rows to %s", args.n, out)
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    x, y = load_data(cfg)
    out = Path(cfg.out)
    train_one(cfg, cfg.preset, x, y, out)
    print(f"wrote {out / 'model_summary.json'} and {out / 'loss_trace.csv'}")
    return EXIT_OK


def restore_model(model_dir: Path) -> tuple[training.Model, RunConfig, dict]:
    summary_path = model_dir / "model_summary.json"
    state_path = model_dir / STATE_FILE
    if not summary_path.is_file() or not state_path.is_file():
        raise ConfigError(f"{model_dir}: missing model artifacts (run train first)")
    summary = json.loads(summary_path.read_text())
    cfg = RunConfig.from_dict(summary["config"])
    x_ref = np.linspace(summary["x_min"], summary["x_max"], summary["num_data"])
    model = build_model(cfg, summary["preset"], x_ref)
    load_state(model, state_path)
    return model, cfg, summary


def cmd_predict(model_dir: Path, grid, mc_samples: int | None) -> int:
    model, cfg, summary = restore_model(model_dir)
    if mc_samples is not None:
        cfg.mc_samples = mc_samples
    grid = parse_grid(grid) if grid is not None else default_grid(summary["x_min"], summary["x_max"])
    path = model_dir / "predictions.csv"
    write_predictions(model, cfg, grid, path)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_compare(cfg: RunConfig) -> int:
    x, y = load_data(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = cfg.grid or default_grid(float(x.min()), float(x.max()))
    results = {}
    for preset in cfg.presets:
        start = time.perf_counter()
        try:
            summary = train_one(cfg, preset, x, y, out / preset)
            write_predictions(summary["_model"], cfg, grid, out / f"{preset}_predictions.csv")
            results[preset] = {**summary["metrics"], "final_loss": summary["final_loss"],
                               "seconds": time.perf_counter() - start}
        except (training.TrainingError, NotPositiveDefinite, FloatingPointError, ValueError) as exc:
            logger.error("%s failed: %s", preset, exc)
            results[preset] = {"error": str(exc), "seconds": time.perf_counter() - start}
    (out / "comparison.json").write_text(json.dumps(results, indent=2) + "\n")
    print(f"wrote {out / 'comparison.json'}")
    return EXIT_OK


def cmd_gradcheck(seed: int = 0) -> int:
    return EXIT_OK if gradcheck.run(seed) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybridbnn", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate-data", help="write a synthetic x,y CSV")
    gen.add_argument("--n", type=int, default=200)
    gen.add_argument("--seed", type=int, default=1)
    gen.add_argument("--out", default="data.csv")

    def run_flags(p):
        p.add_argument("--config", help="JSON file with RunConfig fields")
        p.add_argument("--preset", choices=presets.PRESETS)
        p.add_argument("--data", help="'gen' or a CSV path with an x,y header")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch-size", type=int, help="0 means full batch")
        p.add_argument("--num-inducing", type=int)
        p.add_argument("--kernel")
        p.add_argument("--whiten", action="store_true", default=None)
        p.add_argument("--out")
        p.add_argument("--grid", help="min,max,count")
        p.add_argument("--mc-samples", type=int)

    run_flags(sub.add_parser("train", help="train one preset"))
    cmp_ = sub.add_parser("compare", help="train several presets on the same data")
    run_flags(cmp_)
    cmp_.add_argument("--presets", help="comma-separated subset of presets")

    pred = sub.add_parser("predict", help="predict on a grid from a trained model directory")
    pred.add_argument("--out", required=True, help="model directory written by train")
    pred.add_argument("--grid", help="min,max,count")
    pred.add_argument("--mc-samples", type=int)

    gc = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    gc.add_argument("--seed", type=int, default=0)
    return parser


def resolve_config(args) -> RunConfig:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
    cfg = RunConfig.from_dict(raw)
    flags = {
        "preset": args.preset, "data": args.data, "seed": args.seed, "epochs": args.epochs, "lr": args.lr,
        "num_inducing": args.num_inducing, "kernel": args.kernel, "whiten": args.whiten, "out": args.out,
        "grid": args.grid, "mc_samples": args.mc_samples,
    }
    for key, value in flags.items():
        if value is not None:
            setattr(cfg, key, value)
    if args.batch_size is not None:
        cfg.batch_size = None if args.batch_size == 0 else args.batch_size
    if getattr(args, "presets", None):
        cfg.presets = [p.strip() for p in args.presets.split(",") if p.strip()]
    if args.command == "train" and args.out is None and "out" not in raw:
        cfg.out = str(Path("runs") / cfg.preset)
    return cfg.validate()


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "generate-data":
            return cmd_generate_data(args)
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seed)
        if args.command == "predict":
            return cmd_predict(Path(args.out), args.grid, args.mc_samples)
        cfg = resolve_config(args)
        return cmd_train(cfg) if args.command == "train" else cmd_compare(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (training.TrainingError, NotPositiveDefinite) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
