"""Command-line entry point: train, eval, forecast, ablate, sweep.

Configuration comes from an INI file (section ``[run]``, keys named after
:class:`RunConfig` fields) with command-line flags taking precedence.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 non-finite
loss during training.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import itertools
import logging
import sys
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import dataio
from .dataio import DataError, SplitSpec, Standardizer
from .encoder import ModelConfig
from .metrics import EvalReport, report
from .model import Adapformer
from .training import (Checkpoint, NumericalError, TrainConfig, fit, load_checkpoint,
                       save_checkpoint)

log = logging.getLogger("adapformer")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
VARIANTS = ("full", "no_ace", "no_acf", "no_aux", "ci", "cd")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str = ""
    name: str = ""
    lookback: int = 96
    horizon: int = 96
    d_model: int = 128
    rank: int = 64
    topk: int = 2
    n_heads: int = 8
    n_layers: int = 2
    d_ff: int = 2048
    dropout: float = 0.1
    predictor: str = "acf"
    use_ace: bool = True
    use_aux: bool = True
    aux_scale: str = "length"
    share_predictor: bool = False
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 20
    patience: int = 3
    seed: int = 0
    clip_norm: float | None = None
    train_ratio: float = 0.70
    val_ratio: float = 0.15
    test_ratio: float = 0.15
    out: str = "runs"

    @property
    def dataset_name(self) -> str:
        return self.name or Path(self.dataset).stem

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.train_ratio, self.val_ratio, self.test_ratio)

    def model_config(self, n_channels: int) -> ModelConfig:
        return ModelConfig(lookback=self.lookback, horizon=self.horizon, n_channels=n_channels,
                           d_model=self.d_model, rank=self.rank, topk=min(self.topk, n_channels),
                           n_heads=self.n_heads, n_layers=self.n_layers, d_ff=self.d_ff,
                           dropout=self.dropout, predictor=self.predictor, use_ace=self.use_ace,
                           share_predictor=self.share_predictor)

    def train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                           patience=self.patience, seed=self.seed, use_aux=self.use_aux,
                           clip_norm=self.clip_norm, aux_scale=self.aux_scale)

    def run_dir(self) -> Path:
        return Path(self.out) / f"{self.dataset_name}_T{self.lookback}_L{self.horizon}_s{self.seed}"

    def validate(self, need_dataset: bool = True) -> None:
        problems = []
        if need_dataset:
            if not self.dataset:
                problems.append("dataset: no dataset path given")
            elif not Path(self.dataset).is_file():
                problems.append(f"dataset: file not found: {self.dataset}")
        if self.lookback < 1 or self.horizon < 1:
            problems.append("lookback/horizon: must be >= 1")
        try:
            self.split_spec()
        except ValueError as exc:
            problems.append(f"train_ratio/val_ratio/test_ratio: {exc}")
        try:
            self.train_config()
        except ValueError as exc:
            problems.append(f"train settings: {exc}")
        try:
            self.model_config(max(self.topk, 1))
        except ValueError as exc:
            problems.append(f"model settings: {exc}")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_ini(self) -> str:
        lines = ["[run]"]
        for k, v in asdict(self).items():
            lines.append(f"{k} = {'' if v is None else v}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, raw: str):
    kinds = {f.name: f.type for f in fields(RunConfig)}
    kind = kinds[name]
    raw = raw.strip()
    try:
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind.startswith("float |"):
            return None if raw in ("", "none", "None") else float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from None
    return raw


def read_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config: file not found: {path}")
    parser = configparser.ConfigParser()
    parser.read(path, encoding="utf-8")
    if not parser.has_section("run"):
        raise ConfigError(f"config: {path} has no [run] section")
    known = {f.name for f in fields(RunConfig)}
    values = {}
    for key, raw in parser.items("run"):
        if key not in known:
            raise ConfigError(f"config: unknown key {key!r} in {path}")
        values[key] = _coerce(key, raw)
    return values


# ---------------------------------------------------------------- argument parsing

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="INI file with a [run] section")
    p.add_argument("--dataset", help="CSV file")
    p.add_argument("--name", help="dataset label used in reports and run directories")
    p.add_argument("--lookback", type=int)
    p.add_argument("--horizon", type=int)
    p.add_argument("--d-model", dest="d_model", type=int)
    p.add_argument("--rank", type=int)
    p.add_argument("--topk", type=int)
    p.add_argument("--heads", dest="n_heads", type=int)
    p.add_argument("--layers", dest="n_layers", type=int)
    p.add_argument("--d-ff", dest="d_ff", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--predictor", choices=["acf", "ci", "cd", "mlp"])
    p.add_argument("--share-predictor", dest="share_predictor", action="store_const", const=True)
    p.add_argument("--no-ace", dest="use_ace", action="store_const", const=False)
    p.add_argument("--no-acf", dest="no_acf", action="store_true")
    p.add_argument("--no-aux", dest="use_aux", action="store_const", const=False)
    p.add_argument("--aux-scale", dest="aux_scale", choices=["length", "raw"])
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--clip-norm", dest="clip_norm", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output root directory")
    p.add_argument("--dry-run", action="store_true", help="validate and print the resolved config only")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adapformer", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train, evaluate on the test split, write artifacts")
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset's test split")
    _common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("forecast", help="forecast every window of a CSV with a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="CSV to forecast")
    p.add_argument("--split", choices=["all", "train", "val", "test"], default="all")
    p.add_argument("--predictions", help="predictions CSV path")
    p.add_argument("--plot-data", dest="plot_data", help="write lookback+horizon series for one window")
    p.add_argument("--plot-window", dest="plot_window", type=int, default=-1)
    p.add_argument("--plot-channel", dest="plot_channel", type=int, default=-1,
                   help="channel index for plot data (default: all channels)")

    p = sub.add_parser("ablate", help="compare full model against ablated variants")
    _common(p)
    p.add_argument("--seeds", help="comma-separated seeds (default: --seed only)")
    p.add_argument("--variants", default=",".join(VARIANTS))

    p = sub.add_parser("sweep", help="grid over lr, d_model, rank, topk")
    _common(p)
    p.add_argument("--grid", required=True, help='e.g. "topk=1,2,3;lr=1e-3,5e-4"')
    return parser


def resolve(args) -> RunConfig:
    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    if getattr(args, "no_acf", False):
        values["predictor"] = "mlp"
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# ---------------------------------------------------------------- pipeline pieces

def load_prepared(cfg: RunConfig, standardizer: Standardizer | None = None):
    series = dataio.load_csv(cfg.dataset)
    data = dataio.prepare(series, cfg.lookback, cfg.horizon, cfg.split_spec(), standardizer)
    if len(data.train[0]) == 0 or len(data.val[0]) == 0 or len(data.test[0]) == 0:
        raise DataError(f"{cfg.dataset}: a split is shorter than lookback+horizon")
    return series, data


def _standardizer_extra(st: Standardizer, cfg: RunConfig, columns) -> dict:
    return {"standardizer_mean": st.mean.tolist(), "standardizer_std": st.std.tolist(),
            "columns": list(columns), "dataset": cfg.dataset_name,
            "split": [cfg.train_ratio, cfg.val_ratio, cfg.test_ratio]}


def _standardizer_from(ckpt: Checkpoint) -> Standardizer:
    return Standardizer(mean=np.array(ckpt.extra["standardizer_mean"]),
                        std=np.array(ckpt.extra["standardizer_std"]))


def train_run(cfg: RunConfig, write: bool = True):
    """Fit one model and evaluate on the test split; returns (model, fit result, report, data)."""
    series, data = load_prepared(cfg)
    mcfg = cfg.model_config(series.n_channels)
    model = Adapformer(mcfg, seed=cfg.seed)
    result = fit(model, data.train, data.val, cfg.train_config(),
                 callback=lambda h: log.info("epoch %(epoch)d lr=%(lr).3g train=%(train_loss).5f "
                                             "val=%(val_loss).5f", h))
    pred = model.predict(data.test[0])
    rep = report(pred, data.test[1], data.standardizer, dataset=cfg.dataset_name, seed=cfg.seed)
    if write:
        out = cfg.run_dir()
        out.mkdir(parents=True, exist_ok=True)
        result.checkpoint.extra = _standardizer_extra(data.standardizer, cfg, series.columns)
        save_checkpoint(out / "checkpoint.npz", result.checkpoint)
        (out / "report.txt").write_text(rep.to_text())
        (out / "config.ini").write_text(cfg.to_ini())
        _write_history(out / "history.csv", result.history)
        starts = dataio.window_starts(data.splits[2], cfg.lookback, cfg.horizon)
        write_predictions(out / "predictions.csv", data.standardizer.inverse(pred),
                          data.standardizer.inverse(data.test[1]), starts + cfg.lookback, series.columns)
    return model, result, rep, data


def _write_history(path, history) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(history[0]))
        w.writeheader()
        w.writerows(history)


def write_predictions(path, pred, truth, first_rows, columns) -> None:
    """Long format: window, t (row of the series), channel, prediction, truth."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window", "t", "channel", "prediction", "truth"])
        for wi in range(pred.shape[0]):
            for step in range(pred.shape[1]):
                t = int(first_rows[wi]) + step
                for c, name in enumerate(columns):
                    w.writerow([wi, t, name, repr(float(pred[wi, step, c])),
                                "" if truth is None else repr(float(truth[wi, step, c]))])


def write_plot_data(path, values_raw, pred_raw, start, lookback, columns, channels) -> None:
    """Truth over lookback+horizon and the prediction over the horizon, one window."""
    horizon = pred_raw.shape[0]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "channel", "truth", "prediction"])
        for c in channels:
            for step in range(lookback + horizon):
                t = start + step
                truth = repr(float(values_raw[t, c])) if t < len(values_raw) else ""
                p = repr(float(pred_raw[step - lookback, c])) if step >= lookback else ""
                w.writerow([t, columns[c], truth, p])


# ---------------------------------------------------------------- commands

def cmd_train(cfg: RunConfig) -> EvalReport:
    _, result, rep, _ = train_run(cfg)
    print(rep.to_text(), end="")
    print(f"best epoch {result.checkpoint.epoch}, artifacts in {cfg.run_dir()}")
    return rep


def cmd_eval(cfg: RunConfig, checkpoint: str) -> EvalReport:
    ckpt = load_checkpoint(checkpoint)
    model = ckpt.build_model()
    mc = model.cfg
    cfg = replace(cfg, lookback=mc.lookback, horizon=mc.horizon)
    series, data = load_prepared(cfg, _standardizer_from(ckpt))
    _check_channels(series.n_channels, mc.n_channels)
    pred = model.predict(data.test[0])
    rep = report(pred, data.test[1], data.standardizer, dataset=cfg.dataset_name, seed=ckpt.seed)
    print(rep.to_text(), end="")
    return rep


def _check_channels(n_input: int, n_ckpt: int) -> None:
    if n_input != n_ckpt:
        raise DataError(f"input has {n_input} channels but the checkpoint was trained on {n_ckpt}")


def cmd_forecast(args, cfg: RunConfig):
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    mc = model.cfg
    series = dataio.load_csv(args.input)
    _check_channels(series.n_channels, mc.n_channels)
    st = _standardizer_from(ckpt)
    z = st.apply(series.values)
    if args.split == "all":
        rows = range(series.n_rows)
    else:
        split = SplitSpec(*ckpt.extra.get("split", [0.7, 0.15, 0.15]))
        rows = dataio.split_chronological(series.n_rows, split)[["train", "val", "test"].index(args.split)]
    x, y = dataio.window_arrays(z, rows, mc.lookback, mc.horizon)
    starts = dataio.window_starts(rows, mc.lookback, mc.horizon)
    pred = model.predict(x)
    out_path = Path(args.predictions) if args.predictions else Path(cfg.out) / "predictions.csv"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(out_path, st.inverse(pred), st.inverse(y), starts + mc.lookback, series.columns)
    rep = None
    if len(pred):
        rep = report(pred, y, st, dataset=Path(args.input).stem, seed=ckpt.seed)
        print(rep.to_text(), end="")
    if args.plot_data and len(pred):
        wi = args.plot_window % len(pred)
        chans = range(series.n_channels) if args.plot_channel < 0 else [args.plot_channel]
        write_plot_data(args.plot_data, series.values, st.inverse(pred[wi]), int(starts[wi]),
                        mc.lookback, series.columns, chans)
    print(f"{len(pred)} windows -> {out_path}")
    return pred, rep


def variant_config(cfg: RunConfig, variant: str) -> RunConfig:
    if variant == "full":
        return cfg
    if variant == "no_ace":
        return replace(cfg, use_ace=False)
    if variant == "no_acf":
        return replace(cfg, predictor="mlp")
    if variant == "no_aux":
        return replace(cfg, use_aux=False)
    if variant == "ci":
        return replace(cfg, predictor="ci")
    if variant == "cd":
        return replace(cfg, predictor="cd")
    raise ConfigError(f"unknown variant {variant!r}")


def cmd_ablate(cfg: RunConfig, seeds, variants=VARIANTS):
    """Train every variant for every seed; write a metric x variant table."""
    rows = []
    table = {}
    for seed in seeds:
        for v in variants:
            vcfg = replace(variant_config(cfg, v), seed=seed)
            _, result, rep, _ = train_run(vcfg, write=False)
            aux_norm = max(h["simblock_grad_norm"] for h in result.history)
            log.info("%s seed=%d mse=%.5f simblock_grad_norm=%.3g", v, seed, rep.mse, aux_norm)
            table[(seed, v)] = {"mse": rep.mse, "mae": rep.mae, "r2": rep.r2,
                                "simblock_grad_norm": aux_norm}
    for seed in list(seeds) + ["mean"]:
        for metric in ("mse", "mae", "r2", "simblock_grad_norm"):
            row = {"seed": seed, "metric": metric}
            for v in variants:
                if seed == "mean":
                    row[v] = float(np.mean([table[(s, v)][metric] for s in seeds]))
                else:
                    row[v] = table[(seed, v)][metric]
            rows.append(row)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"ablation_{cfg.dataset_name}_L{cfg.horizon}.csv"
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["seed", "metric", *variants])
        w.writeheader()
        w.writerows(rows)
    print(f"{'seed':>6} {'metric':>8} " + " ".join(f"{v:>9}" for v in variants))
    for r in rows:
        if r["metric"] in ("mse", "mae"):
            print(f"{str(r['seed']):>6} {r['metric']:>8} " + " ".join(f"{r[v]:9.4f}" for v in variants))
    print(f"-> {path}")
    return rows, path


GRID_KEYS = {"lr": "lr", "d": "d_model", "d_model": "d_model", "r": "rank", "rank": "rank",
             "k": "topk", "topk": "topk"}


def parse_grid(text: str) -> dict:
    grid = {}
    for part in filter(None, (p.strip() for p in text.split(";"))):
        if "=" not in part:
            raise ConfigError(f"grid: expected key=v1,v2 in {part!r}")
        key, vals = part.split("=", 1)
        key = key.strip().lower()
        if key not in GRID_KEYS:
            raise ConfigError(f"grid: unsupported key {key!r} (use lr, d_model, rank, topk)")
        field_name = GRID_KEYS[key]
        grid[field_name] = [_coerce(field_name, v) for v in vals.split(",") if v.strip()]
        if not grid[field_name]:
            raise ConfigError(f"grid: no values for {key!r}")
    if not grid:
        raise ConfigError("grid: empty")
    return grid


def cmd_sweep(cfg: RunConfig, grid: dict):
    keys = list(grid)
    rows = []
    for combo in itertools.product(*(grid[k] for k in keys)):
        ccfg = replace(cfg, **dict(zip(keys, combo)))
        ccfg.validate()
        _, _, rep, _ = train_run(ccfg, write=False)
        row = {"lr": ccfg.lr, "d_model": ccfg.d_model, "rank": ccfg.rank, "topk": ccfg.topk,
               "mse": rep.mse, "mae": rep.mae, "r2": rep.r2}
        log.info("%s", row)
        rows.append(row)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"sweep_{cfg.dataset_name}_L{cfg.horizon}_s{cfg.seed}.csv"
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    for r in rows:
        print(", ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in r.items()))
    print(f"-> {path}")
    return rows, path


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve(args)
        cfg.validate(need_dataset=args.command not in ("forecast",))
        if args.command in ("eval", "forecast") and not Path(args.checkpoint).is_file():
            raise ConfigError(f"checkpoint: file not found: {args.checkpoint}")
        if args.command == "forecast" and not Path(args.input).is_file():
            raise ConfigError(f"input: file not found: {args.input}")
        seeds = [cfg.seed]
        if args.command == "ablate" and args.seeds:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        grid = parse_grid(args.grid) if args.command == "sweep" else None
        if args.dry_run:
            print(cfg.to_ini(), end="")
            if grid:
                print(f"grid = {grid}")
            return 0
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.command == "train":
            cmd_train(cfg)
        elif args.command == "eval":
            cmd_eval(cfg, args.checkpoint)
        elif args.command == "forecast":
            cmd_forecast(args, cfg)
        elif args.command == "ablate":
            variants = [v.strip() for v in args.variants.split(",") if v.strip()]
            cmd_ablate(cfg, seeds, variants)
        elif args.command == "sweep":
            cmd_sweep(cfg, grid)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


if __name__ == "__main__":
    sys.exit(main())
