"""Experiment runner.

    kylelab run CONFIG [--seed N]
    kylelab sweep CONFIG [--seed N] [--jobs N]
    kylelab oracle CONFIG
    kylelab gradcheck [--seed N] [--out DIR]

Configs are INI files with dotted section names, e.g.::

    [experiment]
    kind = train
    output_dir = runs/gaussian

    [market]
    mu_z = 0.0
    epsilon = 0.0

    [market.z_dist]
    family = laplace

    [training]
    seed = 3

    [sweep]
    parameter = market.epsilon
    values = 0.1, 0.75, 1.0

A distribution section with only ``family`` is moment-matched to the market
parameters; explicit parameters (``loc``, ``scale``, ...) are used verbatim.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__, analysis, distributions, equilibrium, net
from .distributions import (
    DistributionSpec,
    Family,
    MarketConfig,
    bimodal_spec,
    moment_match,
    shifted_gamma_spec,
)
from .training import InsiderInit, TrainingConfig, run_alternating

log = logging.getLogger("kylelab")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3

KINDS = ("train", "oracle", "gradcheck", "sweep")
PROFIT_SAMPLES = 200_000
FLOAT_FMT = "%.17g"

_MARKET_KEYS = {"mu_z": float, "sigma_z": float, "sigma_y": float, "epsilon": float}
_TRAINING_KEYS = {
    "n_samples": int, "epochs_per_loop": int, "n_loops": int, "insider_init": str,
    "seed": int, "learning_rate": float, "beta1": float, "beta2": float, "eps_hat": float,
    "activation": str, "insider_layers": "ints", "mm_layers": "ints",
}
_EXPERIMENT_KEYS = {"kind": str, "output_dir": str, "profit_samples": int}
_SWEEP_KEYS = {"parameter": str, "values": "floats", "run_kind": str}
_ORACLE_KEYS = {"best_response_iterations": int}
_DIST_PARAM_KEYS = {"loc", "scale", "shape", "shift", "mean_low", "mean_high", "std", "weight"}
_SECTIONS = {
    "experiment": _EXPERIMENT_KEYS, "market": _MARKET_KEYS, "training": _TRAINING_KEYS,
    "sweep": _SWEEP_KEYS, "oracle": _ORACLE_KEYS,
}


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class ExperimentConfig:
    market: MarketConfig
    training: TrainingConfig
    output_dir: Path
    kind: str = "train"
    sweep_parameter: str | None = None
    sweep_values: tuple[float, ...] = ()
    sweep_run_kind: str = "train"
    oracle_iterations: int = 0
    profit_samples: int = PROFIT_SAMPLES
    raw: dict = field(default_factory=dict, compare=False, repr=False)


# ---------------------------------------------------------------------------
# config parsing


def _convert(key, raw, kind):
    try:
        if kind == "ints":
            return tuple(int(p) for p in raw.split(","))
        if kind == "floats":
            vals = tuple(float(p) for p in raw.split(",") if p.strip())
            if not vals:
                raise ValueError("empty list")
            if not all(math.isfinite(v) for v in vals):
                raise ValueError("non-finite value")
            return vals
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(key, f"cannot parse {raw!r} ({exc})") from None


def read_config(path) -> dict:
    """Parse a config file into ``{section: {key: raw_string}}``."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}") from None
    except configparser.Error as exc:
        raise ConfigError("<file>", str(exc).splitlines()[0]) from None
    return {s: dict(parser[s]) for s in parser.sections()}


def _dist_spec(section_name, section, target_mean, target_sd):
    if "family" not in section:
        raise ConfigError(f"{section_name}.family", "missing")
    try:
        family = Family(section["family"].strip().lower())
    except ValueError:
        raise ConfigError(f"{section_name}.family",
                          f"unknown family {section['family']!r}") from None
    params = {}
    for k, v in section.items():
        if k == "family":
            continue
        if k not in _DIST_PARAM_KEYS:
            raise ConfigError(f"{section_name}.{k}", "unknown key")
        params[k] = _convert(f"{section_name}.{k}", v, float)
    try:
        if params:
            return DistributionSpec(family, params)
        if family is Family.SHIFTED_GAMMA:
            return shifted_gamma_spec()
        if family is Family.BIMODAL:
            return bimodal_spec(target_mean, target_sd ** 2)
        return moment_match(family, target_mean, target_sd ** 2)
    except ValueError as exc:
        raise ConfigError(section_name, str(exc)) from None


def build_config(raw: dict, seed_override: int | None = None) -> ExperimentConfig:
    values = {}
    for section, keys in raw.items():
        if section in ("market.z_dist", "market.y_dist"):
            continue
        if section not in _SECTIONS:
            raise ConfigError(section, "unknown section")
        for k, v in keys.items():
            if k not in _SECTIONS[section]:
                raise ConfigError(f"{section}.{k}", "unknown key")
            values[f"{section}.{k}"] = _convert(f"{section}.{k}", v, _SECTIONS[section][k])

    def pick(prefix):
        return {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith(prefix + ".")}

    mk = pick("market")
    mu_z = mk.get("mu_z", MarketConfig.mu_z)
    sigma_z = mk.get("sigma_z", MarketConfig.sigma_z)
    sigma_y = mk.get("sigma_y", MarketConfig.sigma_y)
    if "market.z_dist" in raw:
        mk["z_dist"] = _dist_spec("market.z_dist", raw["market.z_dist"], mu_z, sigma_z)
    if "market.y_dist" in raw:
        mk["y_dist"] = _dist_spec("market.y_dist", raw["market.y_dist"], 0.0, sigma_y)
    try:
        market = MarketConfig(**mk)
    except ValueError as exc:
        raise ConfigError("market", str(exc)) from None

    tr = pick("training")
    if seed_override is not None:
        tr["seed"] = seed_override
    if "insider_init" in tr:
        try:
            tr["insider_init"] = InsiderInit(tr["insider_init"].strip().lower())
        except ValueError:
            raise ConfigError("training.insider_init",
                              f"unknown mode {tr['insider_init']!r}") from None
    try:
        training = TrainingConfig(**tr)
    except ValueError as exc:
        raise ConfigError("training", str(exc)) from None

    ex = pick("experiment")
    kind = ex.get("kind", "train").strip().lower()
    if kind not in KINDS:
        raise ConfigError("experiment.kind", f"must be one of {KINDS}, got {kind!r}")
    sw = pick("sweep")
    if kind == "sweep":
        if "parameter" not in sw:
            raise ConfigError("sweep.parameter", "missing")
        if "values" not in sw:
            raise ConfigError("sweep.values", "missing")
        param = sw["parameter"].strip()
        sec, _, key = param.rpartition(".")
        if sec not in ("market", "training") or key not in _SECTIONS[sec]:
            raise ConfigError("sweep.parameter", f"cannot sweep {param!r}")
    run_kind = sw.get("run_kind", "train").strip().lower()
    if run_kind not in ("train", "oracle"):
        raise ConfigError("sweep.run_kind", f"must be train or oracle, got {run_kind!r}")
    profit_samples = ex.get("profit_samples", PROFIT_SAMPLES)
    if profit_samples < 1:
        raise ConfigError("experiment.profit_samples", "must be >= 1")
    return ExperimentConfig(
        market=market, training=training,
        output_dir=Path(ex.get("output_dir", "kylelab_out")), kind=kind,
        sweep_parameter=sw.get("parameter", "").strip() or None,
        sweep_values=sw.get("values", ()), sweep_run_kind=run_kind,
        oracle_iterations=pick("oracle").get("best_response_iterations", 0),
        profit_samples=profit_samples, raw=raw,
    )


def load_config(path, seed_override: int | None = None) -> ExperimentConfig:
    cfg = build_config(read_config(path), seed_override)
    try:
        cfg.output_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError("experiment.output_dir", f"not writable ({exc})") from None
    return cfg


# ---------------------------------------------------------------------------
# artifact writing


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT % v
    return str(v)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def write_json(path: Path, obj) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default)
    Path(path).write_text(text + "\n")


def read_predictions(path) -> dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """``{grid_kind: (grid, network_output, theory_value)}`` from predictions.csv."""
    cols: dict[str, list] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            cols.setdefault(row["grid_kind"], []).append(
                (float(row["grid_value"]), float(row["network_output"]),
                 float(row["theory_value"])))
    return {k: tuple(np.array(c) for c in zip(*v)) for k, v in cols.items()}


def design_defaults(cfg: ExperimentConfig) -> dict:
    return {
        "weight_init": "glorot_uniform",
        "bias_init": "zero",
        "output_activation": "linear",
        "optimizer": "adam",
        "adam_state": "one optimizer per network, kept across loops",
        "batch_size": 1,
        "resample_each_loop": True,
        "epoch_sample_order": "fixed (no reshuffle)",
        "gaussian_noise_init": "fresh N(0, sigma_y^2) draw per query",
        "approx_linear_init": "theory line + 0.1 * sigma_y * sin(z)",
        "gumbel_convention": "max-Gumbel (right skew)",
        "bimodal_mixture": "equal weights, component offset d = 2 * component sd",
        "abs_subgradient_at_zero": 0.0,
        "quadrature": {"rule": "composite Gauss-Legendre", "nodes": equilibrium.QUAD_NODES,
                       "panel_order": 10,
                       "domain": "mean +/- 12 sd widened to 1e-15 tail quantiles"},
        "best_response": {"grid_points": equilibrium.BR_GRID_POINTS,
                          "half_width_sd_y": equilibrium.BR_HALF_WIDTH_SD,
                          "no_trade_tol": equilibrium.NO_TRADE_TOL},
        "fit_grid_points": analysis.FIT_GRID_POINTS,
        "fit_region_sd": analysis.FIT_REGION_SD,
        "plateau_grid_points": analysis.PLATEAU_GRID_POINTS,
        "plateau_region_sd": analysis.PLATEAU_REGION_SD,
        "plateau_threshold": analysis.default_plateau_threshold(cfg.market),
        "plateau_endpoints": "dead-zone least-squares breakpoints",
        "profit_samples": cfg.profit_samples,
        "csv_float_format": FLOAT_FMT,
    }


def _meta(cfg: ExperimentConfig, kind: str) -> dict:
    return {
        "kylelab_version": __version__,
        "kind": kind,
        "seed": cfg.training.seed,
        "market": cfg.market.to_dict(),
        "training": cfg.training.to_dict(),
        "defaults": design_defaults(cfg),
    }


def prediction_rows(insider, mm, config: MarketConfig):
    eq = equilibrium.theorem1(config)
    zg, vg = analysis.fit_grids(config)
    zp = analysis.plateau_grid(config)
    br = np.maximum(0.0, np.abs(zp - config.mu_z) - config.epsilon) \
        * np.sign(zp - config.mu_z) / (2.0 * eq.lam)
    rows = []
    for kind, grid, out, theory in (
            ("z", zg, insider(zg), eq.order(zg)),
            ("v", vg, mm(vg), eq.price(vg)),
            ("z_plateau", zp, insider(zp), br)):
        rows.extend((kind, float(g), float(o), float(t)) for g, o, t in zip(grid, out, theory))
    return rows


def summary_from_predictions(table: dict, config: MarketConfig) -> dict:
    """Fit and plateau summaries computed from tabulated network outputs only."""
    zg, zo, _ = table["z"]
    vg, vo, _ = table["v"]
    zp, po, _ = table["z_plateau"]

    def lookup(grid, vals):
        return lambda x: np.interp(x, grid, vals)

    est = analysis.estimate_equilibrium(lookup(zg, zo), lookup(vg, vo), config, n_grid=len(zg))
    plat = analysis.detect_plateau(lookup(zp, po), config, n_grid=len(zp))
    return {"equilibrium_estimate": est.to_dict(), "plateau_estimate": plat.to_dict()}


# ---------------------------------------------------------------------------
# experiment kinds


def run_training(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    market, tc = cfg.market, cfg.training
    log.info("training: seed=%d epsilon=%g mu_z=%g", tc.seed, market.epsilon, market.mu_z)
    write_json(out / "meta.json", _meta(cfg, "train"))
    insider, mm, trace = run_alternating(market, tc)

    write_csv(out / "trace.csv", trace.columns,
              ([getattr(r, c) for c in trace.columns] for r in trace.records))
    rows = prediction_rows(insider, mm, market)
    write_csv(out / "predictions.csv",
              ("grid_kind", "grid_value", "network_output", "theory_value"), rows)
    ckpt_meta = {"market": market.to_dict(), "training": tc.to_dict(), "seed": tc.seed}
    net.save(insider, out / "insider.json", {**ckpt_meta, "role": "insider"})
    net.save(mm, out / "market_maker.json", {**ckpt_meta, "role": "market_maker"})

    summary = summary_from_predictions(read_predictions(out / "predictions.csv"), market)
    profit_rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 1]))
    summary["profit"] = {
        "insider": analysis.expected_insider_profit(insider, mm, market, cfg.profit_samples,
                                                    profit_rng),
        "market_maker": analysis.expected_mm_profit(insider, mm, market, cfg.profit_samples,
                                                    profit_rng),
        "insider_frictionless_theory": equilibrium.equilibrium_profit(market),
        "seed_entropy": [tc.seed, 1],
    }
    summary["theory"] = equilibrium.theorem1(market).to_dict()
    summary["plateau_prediction"] = equilibrium.plateau_prediction(market).to_dict()
    summary["convergence"] = {"first_loop_within_10pct": trace.first_loop_within(market)}
    summary["status"] = "ok"
    write_json(out / "summary.json", summary)
    return summary


def _support_region(market: MarketConfig):
    """Insider fit region clipped to the support of Z."""
    lo, hi = analysis.insider_region(market)
    return max(lo, distributions.truncation_bounds(market.z_dist)[0]), hi


def _bend_dict(b) -> dict:
    return {"bend": b.bend, "left": asdict(b.left), "right": asdict(b.right)}


def run_oracle(cfg: ExperimentConfig) -> dict:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    market = cfg.market
    write_json(out / "meta.json", _meta(cfg, "oracle"))
    eq = equilibrium.theorem1(market)
    fp = equilibrium.fixed_point(market)
    zg, vg = analysis.fit_grids(market)
    zp = analysis.plateau_grid(market)
    quad = equilibrium.numerical_pricing(eq.order, market.z_dist, market.y_dist, vg)
    br = equilibrium.best_response_curve(eq.price, zp, market.y_dist, market.epsilon)
    rows = [("order_theory", z, v) for z, v in zip(zg, eq.order(zg))]
    rows += [("price_theory", v, p) for v, p in zip(vg, eq.price(vg))]
    rows += [("price_quadrature", v, p) for v, p in zip(vg, quad)]
    rows += [("best_response", z, x) for z, x in zip(zp, br)]
    summary = {
        "theory": eq.to_dict(),
        "fixed_point": fp.to_dict(),
        "plateau_prediction": equilibrium.plateau_prediction(market).to_dict(),
        "plateau_estimate": analysis.detect_plateau(
            lambda z: np.interp(z, zp, br), market).to_dict(),
        "max_abs_quadrature_vs_linear_price": float(np.max(np.abs(quad - eq.price(vg)))),
        "insider_frictionless_profit": equilibrium.equilibrium_profit(market),
    }
    if cfg.oracle_iterations > 0:
        tab = equilibrium.iterate_best_responses(market, cfg.oracle_iterations)
        rows += [("order_iterated", z, x) for z, x in zip(zg, tab.order(zg))]
        rows += [("price_iterated", v, p) for v, p in zip(vg, tab.price(vg))]
        summary["iterated_equilibrium"] = {
            "iterations": cfg.oracle_iterations,
            "estimate": analysis.estimate_equilibrium(tab.order, tab.price, market).to_dict(),
            "plateau_estimate": analysis.detect_plateau(tab.order, market).to_dict(),
            "bend": _bend_dict(analysis.fit_bend(tab.order, _support_region(market))),
        }
    write_csv(out / "oracle.csv", ("grid_kind", "grid_value", "value"), rows)
    summary["status"] = "ok"
    write_json(out / "summary.json", summary)
    return summary


def run_gradcheck(seed: int = 0, out: Path | None = None, n_draws: int = 50) -> dict:
    result = {act: net.gradient_check(n_draws=n_draws, seed=seed, activation=act)
              for act in ("tanh", "relu")}
    result["max_rel_error"] = max(max(r["max_rel_error_mm"], r["max_rel_error_insider"])
                                  for r in (result["tanh"], result["relu"]))
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
        write_json(Path(out) / "gradcheck.json", result)
    return result


def _override(raw: dict, dotted: str, value) -> dict:
    sec, _, key = dotted.rpartition(".")
    new = {s: dict(v) for s, v in raw.items()}
    new.setdefault(sec, {})[key] = repr(value) if isinstance(value, float) else str(value)
    return new


def _sweep_one(args):
    raw, param, value, seed, out_dir, run_kind = args
    row = {"value": value, "seed": seed, "status": "ok", "error": ""}
    sec, _, key = param.rpartition(".")
    try:
        raw = _override(raw, param, int(value) if _SECTIONS[sec][key] is int else value)
        raw = _override(raw, "experiment.output_dir", str(out_dir))
        raw = _override(raw, "experiment.kind", run_kind)
        cfg = build_config(raw, seed_override=seed)
        summary = run_training(cfg) if run_kind == "train" else run_oracle(cfg)
        plat = summary["plateau_estimate"]
        row.update(plateau_lower=plat["lower"], plateau_upper=plat["upper"],
                   plateau_width=plat["width"], plateau_detected=plat["detected"])
        if "equilibrium_estimate" in summary:
            est = summary["equilibrium_estimate"]
            row.update(insider_slope=est["insider_slope"], insider_r2=est["insider_r2"],
                       mm_slope=est["mm_slope"], mm_r2=est["mm_r2"])
    except net.TrainingDiverged as exc:
        row.update(status="diverged", error=str(exc))
    except ConfigError as exc:
        row.update(status="config_error", error=str(exc))
    return row


SWEEP_COLUMNS = ("value", "seed", "status", "plateau_lower", "plateau_upper", "plateau_width",
                 "plateau_detected", "insider_slope", "insider_r2", "mm_slope", "mm_r2", "error")


def run_sweep(cfg: ExperimentConfig, jobs: int = 1) -> list[dict]:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "meta.json", {**_meta(cfg, "sweep"), "sweep": {
        "parameter": cfg.sweep_parameter, "values": list(cfg.sweep_values),
        "run_kind": cfg.sweep_run_kind, "seeds": "base seed + value index"}})
    key = cfg.sweep_parameter.rpartition(".")[2]
    base = cfg.training.seed
    tasks = [(cfg.raw, cfg.sweep_parameter, v,
              int(v) if cfg.sweep_parameter == "training.seed" else base + i,
              out / f"{key}={v!r}", cfg.sweep_run_kind)
             for i, v in enumerate(cfg.sweep_values)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_one, tasks))
    else:
        rows = [_sweep_one(t) for t in tasks]
    write_csv(out / "sweep.csv", SWEEP_COLUMNS,
              ([r.get(c, "") for c in SWEEP_COLUMNS] for r in rows))
    return rows


def run_experiment(config_path, seed_override: int | None = None, jobs: int = 1) -> int:
    """Run whatever ``experiment.kind`` the config names; returns an exit status."""
    try:
        cfg = load_config(config_path, seed_override)
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    try:
        if cfg.kind == "train":
            run_training(cfg)
        elif cfg.kind == "oracle":
            run_oracle(cfg)
        elif cfg.kind == "gradcheck":
            res = run_gradcheck(cfg.training.seed, cfg.output_dir)
            print(f"max relative gradient error: {res['max_rel_error']:.3e}")
        else:
            rows = run_sweep(cfg, jobs)
            if any(r["status"] != "ok" for r in rows):
                return EXIT_DIVERGED
    except net.TrainingDiverged as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DIVERGED
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="kylelab", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("run", "sweep", "oracle"):
        p = sub.add_parser(name)
        p.add_argument("config")
        p.add_argument("--seed", type=int, default=None, help="override training.seed")
        if name == "sweep":
            p.add_argument("--jobs", type=int, default=1, help="parallel sweep values")
    p = sub.add_parser("gradcheck")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")

    if args.command == "gradcheck":
        res = run_gradcheck(args.seed, args.out)
        print(f"max relative gradient error: {res['max_rel_error']:.3e}")
        return EXIT_OK if res["max_rel_error"] < 1e-4 else EXIT_FAILED

    try:
        cfg = load_config(args.config, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    expected = {"run": "train", "oracle": "oracle", "sweep": "sweep"}[args.command]
    if args.command == "sweep" and cfg.kind != "sweep":
        print("config error: experiment.kind: sweep command needs kind = sweep",
              file=sys.stderr)
        return EXIT_CONFIG
    cfg = replace(cfg, kind=expected)
    try:
        if expected == "train":
            s = run_training(cfg)
            est = s["equilibrium_estimate"]
            print(f"insider slope {est['insider_slope']:.4f}  mm slope {est['mm_slope']:.4f}  "
                  f"-> {cfg.output_dir}")
        elif expected == "oracle":
            s = run_oracle(cfg)
            p = s["plateau_estimate"]
            print(f"lambda {s['theory']['lambda']:.6g}  plateau [{p['lower']:.4g}, "
                  f"{p['upper']:.4g}]  -> {cfg.output_dir}")
        else:
            rows = run_sweep(cfg, args.jobs)
            for r in rows:
                print(f"{cfg.sweep_parameter}={r['value']!r}: {r['status']}")
            if any(r["status"] != "ok" for r in rows):
                return EXIT_DIVERGED
    except net.TrainingDiverged as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
