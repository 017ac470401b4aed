"""Command-line entry point: ``districtode <subcommand> [flags]``.

Subcommands: train, evaluate, forecast, gradcheck, embeddings, synth.
On failure a single ``error: <Kind>: <message>`` line goes to stderr and
the exit status is nonzero.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import sys
import warnings
from pathlib import Path

import numpy as np

from . import gradcheck
from .data import IndicatorPanel, TimeScale, load_panel, normalize_year, synthetic_panel, write_panel
from .model import ModelConfig, PovertyModel, batch_loss, load_model, predict_panel, save_model
from .odeint import SolverConfig
from .pca import power_pca
from .train import TrainConfig, fit

# converged reference reached on the original (unpublished) survey panel
REFERENCE_LOSS = 0.000479
REFERENCE_RMSE = 0.021885

DEFAULT_CHECKPOINT = "model.ckpt"


class CliError(Exception):
    pass


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint_path(args) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(args.out) / DEFAULT_CHECKPOINT


def _require_data(args) -> IndicatorPanel:
    if not args.data:
        raise CliError("--data is required")
    return load_panel(args.data)


def _solver(args, meta: dict | None = None) -> SolverConfig:
    base = SolverConfig(**(meta or {}).get("solver", {}))
    kw = {}
    if args.rtol is not None:
        kw["rtol"] = args.rtol
    if args.atol is not None:
        kw["atol"] = args.atol
    return base.with_(**kw) if kw else base


def _parse_years(text: str) -> list[int]:
    try:
        years = [int(y) for y in text.split(",") if y.strip()]
    except ValueError:
        raise CliError(f"--years must be a comma-separated list of integers, got {text!r}") from None
    if not years:
        raise CliError("--years is empty")
    if any(y < 1900 for y in years):
        raise CliError("years must be calendar years >= 1900")
    return years


def _write_rows(path: Path, header, rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _aligned(model: PovertyModel, panel: IndicatorPanel) -> None:
    if panel.shape[2] != model.config.n_indicators:
        raise CliError(f"data has {panel.shape[2]} indicators, checkpoint expects "
                       f"{model.config.n_indicators}")
    model.district_index(panel.district_names)


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    panel = _require_data(args)
    out = _out_dir(args)
    ts = TimeScale(panel.years[0], panel.years[-1]) if len(panel.years) > 1 else TimeScale()
    cfg = ModelConfig(n_districts=panel.shape[0], n_indicators=panel.shape[2],
                      reverse_encoder=args.reverse_encoder)
    model = PovertyModel.create(cfg, seed=args.seed, district_names=panel.district_names,
                                time_scale=ts)
    tkw = {"seed": args.seed, "decoupled_weight_decay": args.decoupled_wd}
    if args.epochs is not None:
        tkw["epochs"] = args.epochs
    if args.lr is not None:
        tkw["lr_max"] = args.lr
    tcfg = TrainConfig(**tkw)
    solver = _solver(args)
    trained, tlog = fit(model, panel, tcfg, solver)
    ckpt = _checkpoint_path(args)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_model(trained, ckpt, extra={"solver": {"rtol": solver.rtol, "atol": solver.atol}})
    tlog.write_csv(out / "train_log.csv")
    loss, _ = batch_loss(trained, panel, solver)
    print(f"final_loss={loss:.6g} rmse={math.sqrt(loss):.6g} epochs={tcfg.epochs} "
          f"checkpoint={ckpt} (reference on the original survey panel: "
          f"loss={REFERENCE_LOSS} rmse={REFERENCE_RMSE})")
    return 0


def evaluate_rmse(model: PovertyModel, panel: IndicatorPanel, solver: SolverConfig):
    """Per-indicator RMSE over observed cells, the overall RMSE, and predictions."""
    times, preds = predict_panel(model, panel, solver)
    resid = np.where(panel.mask, preds - panel.values, 0.0)
    counts = panel.mask.sum(axis=(0, 1))
    per = {}
    for k, name in enumerate(panel.indicator_names):
        per[name] = math.sqrt(float(np.sum(resid[:, :, k] ** 2)) / counts[k]) if counts[k] else float("nan")
    overall = math.sqrt(float(np.sum(resid ** 2)) / panel.n_observed)
    return per, overall, preds


def cmd_evaluate(args) -> int:
    panel = _require_data(args)
    model, meta = load_model(_checkpoint_path(args))
    _aligned(model, panel)
    solver = _solver(args, meta)
    per, overall, preds = evaluate_rmse(model, panel, solver)
    out = _out_dir(args)
    rows = [(k, repr(v)) for k, v in per.items()] + [("overall", repr(overall))]
    _write_rows(out / "evaluation.csv", ("indicator", "rmse"), rows)
    recon = []
    for i, d in enumerate(panel.district_names):
        for j, y in enumerate(panel.years):
            recon.append([d, _year_str(y)] + [repr(float(v)) for v in preds[i, j]])
    _write_rows(out / "reconstruction.csv", ("district", "year") + panel.indicator_names, recon)
    width = max(len(k) for k in per)
    for k, v in per.items():
        print(f"{k:<{width}}  {v:.5f}")
    print(f"{'overall':<{width}}  {overall:.5f}")
    return 0


def _year_str(y: float) -> str:
    return str(int(y)) if float(y).is_integer() else repr(float(y))


def cmd_forecast(args) -> int:
    panel = _require_data(args)
    model, meta = load_model(_checkpoint_path(args))
    _aligned(model, panel)
    years = _parse_years(args.years)
    solver = _solver(args, meta)
    req = {y: normalize_year(model.time_scale, y) for y in years}
    if any(t < 0 for t in req.values()):
        raise CliError(f"forecast years must not precede {model.time_scale.year0:g}")
    times, preds = predict_panel(model, panel, solver, extra_times=req.values())
    out = _out_dir(args)
    header = ("district",) + panel.indicator_names
    for y, t in req.items():
        j = times.index(t)
        rounded, full = [], []
        for i, d in enumerate(panel.district_names):
            rounded.append([d] + [f"{v:.3f}" for v in preds[i, j]])
            full.append([d] + [repr(float(v)) for v in preds[i, j]])
        _write_rows(out / f"forecast_{y}.csv", header, rounded)
        _write_rows(out / f"forecast_{y}_full.csv", header, full)
        print(f"wrote {out / f'forecast_{y}.csv'} ({len(rounded)} districts)")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_suite(args.seed, sabotage=args.sabotage)
    for r in results:
        print(r.line())
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CliError(f"gradient check failed: {', '.join(failed)}")
    return 0


def cmd_embeddings(args) -> int:
    model, _ = load_model(_checkpoint_path(args))
    table = model.views()["embedding"]
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        scores, _, _ = power_pca(table, 2, seed=args.seed)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    out = _out_dir(args)
    rows = [(d, repr(float(s[0])), repr(float(s[1]))) for d, s in zip(model.district_names, scores)]
    _write_rows(out / "embeddings_pca.csv", ("district", "pc1", "pc2"), rows)
    print(f"wrote {out / 'embeddings_pca.csv'} ({len(rows)} districts)")
    return 0


def cmd_synth(args) -> int:
    out = _out_dir(args)
    path = Path(args.data) if args.data else out / "synthetic_panel.csv"
    path.parent.mkdir(parents=True, exist_ok=True)
    write_panel(synthetic_panel(args.n_districts, seed=args.seed), path)
    print(f"wrote {path}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "forecast": cmd_forecast,
    "gradcheck": cmd_gradcheck,
    "embeddings": cmd_embeddings,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", help="panel CSV (synth: output path)")
    common.add_argument("--checkpoint", help=f"checkpoint path (default: OUT/{DEFAULT_CHECKPOINT})")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--epochs", type=int)
    common.add_argument("--lr", type=float, help="peak learning rate")
    common.add_argument("--rtol", type=float)
    common.add_argument("--atol", type=float)
    common.add_argument("--years", default="2026,2030", help="comma-separated forecast years")
    common.add_argument("--reverse-encoder", action="store_true",
                        help="feed the encoder newest observation first")
    common.add_argument("--decoupled-wd", action="store_true", help="decoupled weight decay")
    common.add_argument("--n-districts", type=int, default=30, help=argparse.SUPPRESS)
    common.add_argument("--sabotage", action="store_true", help=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="districtode", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "fit a model to a panel CSV",
        "evaluate": "per-indicator RMSE of a checkpoint on a panel",
        "forecast": "forecast tables for the given years",
        "gradcheck": "finite-difference and BPTT checks of the adjoint gradients",
        "embeddings": "2-D PCA projection of the district embeddings",
        "synth": "write the synthetic logistic-growth panel",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"error: {args.command}: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: FileNotFoundError: {exc}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, RuntimeError, FloatingPointError) as exc:
        msg = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
