"""Command-line entry point: ``mvar {qc,train,forecast,evaluate,synth,plan}``.

Exit codes: 0 success, 2 input/config error, 3 empty result, 4 missing
dependency artifact (e.g. a lead-time checkpoint).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np
import pandas as pd
import yaml

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .evaluation import relative_rmse, rmse_buckets
from .kriging import Variogram
from .meteo import GridFormatError, read_grid
from .model import HyperParams, normalized_coords
from .qc import MalformedRowError, read_station_csv, run_qc
from .scheduler import DEFAULT_LEADS, MissingCheckpointError, TimelineError, forecast_hourly, greedy_plan
from .series import (CitySeries, EmptyDatasetError, compute_norm_stats, denormalize_array, format_time,
                     normalize_array, parse_times, read_city_csv, write_city_csv)
from .synthetic import SynthConfig, generate, write_outputs
from .training import TrainConfig, train, write_loss_log
from .workflow import MeteoScaler, aligned_meteo, build_dataset, hyperparams_for, step_model

log = logging.getLogger("mvar")

EXIT_OK, EXIT_INPUT, EXIT_EMPTY, EXIT_MISSING = 0, 2, 3, 4


class InputError(Exception):
    """Bad user input or configuration (exit 2)."""


class MissingArtifactError(Exception):
    """A required upstream artifact is absent (exit 4)."""


def checkpoint_name(lead: int, best: bool = False) -> str:
    # the final-epoch checkpoint is the one forecast loads; the best-validation one sits beside it
    return f"lead_{int(lead)}h{'.best' if best else ''}.mvck"


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {p}")
    return p


def _seed_override(seed: int) -> int:
    env = os.environ.get("MVAR_SEED")
    if env is None or env == "":
        return seed
    try:
        value = int(env)
    except ValueError:
        raise InputError(f"MVAR_SEED must be an unsigned integer, got {env!r}") from None
    if value < 0:
        raise InputError("MVAR_SEED must be >= 0")
    return value


def _load_yaml(path) -> dict:
    p = _need_file(path, "config file")
    try:
        data = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise InputError(f"{p}: invalid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise InputError(f"{p}: top level must be a mapping")
    return data


def _reject_unknown(section: dict, allowed, where: str) -> None:
    unknown = set(section) - set(allowed)
    if unknown:
        raise InputError(f"unknown {where} keys: {sorted(unknown)}")


# ---------------------------------------------------------------------------
# qc
# ---------------------------------------------------------------------------

def _parse_variogram(spec: str):
    if spec == "auto":
        return "auto"
    try:
        sill, rng = (float(x) for x in spec.split(","))
        return Variogram(sill=sill, range=rng)
    except ValueError:
        raise InputError(f"--variogram must be 'auto' or 'sill,range', got {spec!r}") from None


def cmd_qc(args) -> int:
    table = read_station_csv(_need_file(args.stations, "station CSV"), args.local_offset)
    res = run_qc(table, _parse_variogram(args.variogram))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    series = res.series
    write_city_csv(series, out / "city.csv", {"local_offset_hours": args.local_offset})
    stats_series = series
    if args.stats_until:
        hi = int(series.times.searchsorted(parse_times([args.stats_until], args.local_offset)[0]))
        stats_series = series.slice_time(0, hi)
    compute_norm_stats(stats_series).save(out / "norm_stats.json")
    (out / "qc_report.json").write_text(json.dumps(res.report, indent=1, sort_keys=True))
    rep = res.report
    print(f"stations: {rep['stations_total']} total, {rep['stations_removed']} removed; "
          f"cities: {len(series.city_ids)}; timestep statuses: {rep['timestep_status_counts']}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_SECTIONS = ("data", "model", "train", "out_dir", "use_meteo")
DATA_KEYS = ("city_csv", "meteo", "train_end", "val_end", "sample_stride", "local_offset_hours")


def _split_index(series: CitySeries, stamp, default_frac: float, offset: float) -> int:
    if stamp is None:
        return int(round(len(series.times) * default_frac))
    return int(series.times.searchsorted(parse_times([str(stamp)], offset)[0]))


def cmd_train(args) -> int:
    cfg = _load_yaml(args.config)
    _reject_unknown(cfg, TRAIN_SECTIONS, "config")
    data = cfg.get("data") or {}
    _reject_unknown(data, DATA_KEYS, "data")
    if "city_csv" not in data:
        raise InputError("data.city_csv is required")
    base = Path(args.config).parent
    resolve = lambda p: p if Path(p).is_absolute() else base / p  # noqa: E731
    use_meteo = bool(cfg.get("use_meteo", False))
    model_kw = dict(cfg.get("model") or {})
    _reject_unknown(model_kw, HyperParams.__dataclass_fields__, "model")
    train_kw = dict(cfg.get("train") or {})
    try:
        tcfg = TrainConfig.defaults_for(use_meteo, **train_kw)
    except (TypeError, ValueError) as exc:
        raise InputError(str(exc)) from None
    if args.lead is not None:
        tcfg.lead_hours = args.lead
    tcfg.seed = _seed_override(tcfg.seed)
    try:
        tcfg.validate()
    except ValueError as exc:
        raise InputError(str(exc)) from None

    offset = float(data.get("local_offset_hours", 8.0))
    series = read_city_csv(_need_file(resolve(data["city_csv"]), "city CSV"))
    grid = None
    if use_meteo:
        if not data.get("meteo"):
            raise InputError("use_meteo requires data.meteo")
        grid = read_grid(_need_file(resolve(data["meteo"]), "meteo grid"))
    tr_hi = _split_index(series, data.get("train_end"), 0.8, offset)
    va_hi = _split_index(series, data.get("val_end"), 0.9, offset)
    if not 0 < tr_hi <= va_hi <= len(series.times):
        raise InputError(f"bad split: train_end index {tr_hi}, val_end index {va_hi}")
    try:
        hp = hyperparams_for(series, grid, **{**model_kw, "use_meteo": use_meteo})
    except (TypeError, ValueError) as exc:
        raise InputError(f"model config: {exc}") from None
    stats = compute_norm_stats(series.slice_time(0, tr_hi))
    meteo = scaler = None
    if use_meteo:
        train_times = series.times[:tr_hi]
        pos = grid.times.get_indexer(train_times)
        scaler = MeteoScaler.fit(grid, pos[pos >= 0])
        try:
            meteo = aligned_meteo(series, grid, scaler)
        except KeyError as exc:
            raise InputError(str(exc)) from None
    trd = build_dataset(series, stats, hp, tcfg.lead_hours, tcfg.tau, 0, tr_hi, meteo)
    vad = build_dataset(series, stats, hp, tcfg.lead_hours, tcfg.tau, tr_hi, va_hi, meteo)
    stride = int(data.get("sample_stride", 1))
    if stride < 1:
        raise InputError("data.sample_stride must be >= 1")
    trd.starts = trd.starts[::stride]
    if len(trd) == 0:
        raise EmptyDatasetError("no complete training windows for this lead and rollout length")
    log.info("training lead %dh: %d train / %d val samples", tcfg.lead_hours, len(trd), len(vad))
    result = train(hp, tcfg, trd, vad if len(vad) else None, progress=args.verbose)

    out = Path(cfg.get("out_dir") or args.out or "checkpoints")
    if not out.is_absolute() and cfg.get("out_dir"):
        out = base / out
    out.mkdir(parents=True, exist_ok=True)
    extra = {
        "lead_hours": tcfg.lead_hours,
        "train_config": tcfg.to_dict(),
        "best_epoch": result.best_epoch,
        "cities": {"city_id": list(series.city_ids), "lat": series.lat.tolist(), "lon": series.lon.tolist()},
        "meteo_scaler": scaler.to_dict() if scaler is not None else None,
        "version": __version__,
    }
    ck = out / checkpoint_name(tcfg.lead_hours)
    save_checkpoint(ck, result.params, hp, stats, extra)
    save_checkpoint(out / checkpoint_name(tcfg.lead_hours, best=True), result.best_params, hp, stats, extra)
    write_loss_log(result.log, out / f"loss_lead_{tcfg.lead_hours}h.csv")
    print(f"wrote {ck} (final epoch {tcfg.epochs}; best epoch {result.best_epoch} in {ck.stem}.best.mvck)")
    return EXIT_OK


# ---------------------------------------------------------------------------
# forecast
# ---------------------------------------------------------------------------

def _required_leads(horizon: int, leads) -> List[int]:
    need = set()
    for h in range(1, horizon + 1):
        need.update(greedy_plan(h, leads).steps)
    return sorted(need, reverse=True)


def cmd_forecast(args) -> int:
    leads = tuple(int(x) for x in args.leads.split(","))
    plan = greedy_plan(args.horizon, leads)
    ck_dir = Path(args.checkpoints)
    if not ck_dir.is_dir():
        raise MissingArtifactError(f"checkpoint directory not found: {ck_dir}")
    loaded = {}
    for lead in _required_leads(args.horizon, leads):
        path = ck_dir / checkpoint_name(lead)
        if not path.is_file():
            raise MissingCheckpointError(lead)
        loaded[lead] = load_checkpoint(path)

    first = next(iter(loaded.values()))
    stats = first[2]
    if stats is None:
        raise InputError("checkpoint lacks normalisation statistics")
    cities = first[3].get("cities") or {}
    for lead, (_, hp, st, extra) in loaded.items():
        if st is None or st.city_ids != stats.city_ids or hp.D != first[1].D:
            raise InputError(f"checkpoint for lead {lead}h was trained on different cities or pollutants")

    history = read_city_csv(_need_file(args.history, "history city CSV"))
    if list(history.city_ids) != list(stats.city_ids):
        order = [history.city_ids.index(c) for c in stats.city_ids if c in history.city_ids]
        if len(order) != len(stats.city_ids):
            raise InputError("history CSV lacks some checkpoint cities")
        history = history.select_cities(order)
    init = parse_times([args.init], args.local_offset)[0]
    pos = history.times.get_indexer([init])[0]
    back = max(leads)
    if pos < back:
        raise InputError(f"history must cover {back} hours before the init time {format_time(init)}")
    obs = normalize_array(history.values[pos - back:pos + 1], stats)
    # incomplete hours are left out; the composer fails only if a step needs one
    hist = {k - back: obs[k] for k in range(back + 1) if np.isfinite(obs[k]).all()}
    if 0 not in hist:
        raise InputError(f"history has missing values at the init time {format_time(init)}")

    lat = np.asarray(cities.get("lat", history.lat))
    lon = np.asarray(cities.get("lon", history.lon))
    grid = None
    if any(hp.use_meteo for _, hp, _, _ in loaded.values()):
        if not args.meteo:
            raise InputError("meteo-coupled checkpoints need --meteo")
        grid = read_grid(_need_file(args.meteo, "meteo grid"))
    models = {}
    for lead, (params, hp, _, extra) in loaded.items():
        meteo_at = None
        if hp.use_meteo:
            scaler = MeteoScaler.from_dict(extra["meteo_scaler"])

            def meteo_at(offset, scaler=scaler):
                t = init + pd.Timedelta(hours=int(offset))
                try:
                    return scaler.apply(grid.align(pd.DatetimeIndex([t]))[0])
                except KeyError:
                    raise InputError(f"meteo grid has no field for {format_time(t)}") from None
        models[lead] = step_model(params, hp, normalized_coords(hp, lat, lon), lead, init, meteo_at)

    fc = forecast_hourly(args.horizon, models, hist, leads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.txt").write_text(plan.dump())
    print(plan.dump(), end="")
    init_s = format_time(init)
    with open(out / "forecast.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["init_time", "offset_hours", "city_id", "pollutant", "value"])
        for h in range(1, args.horizon + 1):
            phys = denormalize_array(fc.timeline[h], stats)
            for i, c in enumerate(stats.city_ids):
                for j, p in enumerate(stats.pollutants):
                    w.writerow([init_s, h, c, p, repr(float(phys[i, j]))])
    with open(out / "invocations.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["offset_hours", "invocations"])
        for h in range(1, args.horizon + 1):
            w.writerow([h, fc.invocations[h]])
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _read_forecast(path) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, dtype={"city_id": str, "pollutant": str, "init_time": str},
                         float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise InputError(f"{path}: {exc}") from None
    cols = ["init_time", "offset_hours", "city_id", "pollutant", "value"]
    if list(df.columns) != cols:
        raise InputError(f"{path}: expected columns {','.join(cols)}")
    df["init_time"] = parse_times(df["init_time"])
    return df


def _align(df: pd.DataFrame, truth: CitySeries, resolution: int):
    inits = sorted(df["init_time"].unique())
    offsets = sorted(df["offset_hours"].unique())
    steps = max(offsets) // resolution
    cities = {c: i for i, c in enumerate(truth.city_ids)}
    pols = {p: j for j, p in enumerate(truth.pollutants)}
    init_ix = {t: a for a, t in enumerate(inits)}
    shape = (len(inits), steps, len(cities), len(pols))
    pred = np.full(shape, np.nan)
    obs = np.full(shape, np.nan)
    for r in df.itertuples(index=False):
        if r.offset_hours % resolution or r.city_id not in cities or r.pollutant not in pols:
            continue
        pred[init_ix[r.init_time], r.offset_hours // resolution - 1, cities[r.city_id], pols[r.pollutant]] = r.value
    for a, t in enumerate(inits):
        for s in range(steps):
            k = truth.times.get_indexer([t + pd.Timedelta(hours=(s + 1) * resolution)])[0]
            if k >= 0:
                obs[a, s] = truth.values[k]
    obs[np.isnan(pred)] = np.nan
    return pred, obs, inits


def cmd_evaluate(args) -> int:
    df = _read_forecast(_need_file(args.pred, "prediction CSV"))
    truth = read_city_csv(_need_file(args.truth, "truth CSV"))
    if df.empty:
        raise EmptyDatasetError("prediction CSV has no rows")
    offsets = df["offset_hours"].to_numpy()
    res = args.resolution or int(np.gcd.reduce(offsets.astype(np.int64)))
    pred, obs, inits = _align(df, truth, res)
    if not np.isfinite(obs).any():
        raise EmptyDatasetError("no overlap between predictions and ground truth")
    rep = rmse_buckets(pred, obs, res, list(truth.pollutants), args.pooling, [format_time(t) for t in inits])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rep.write_csv(out / "buckets.csv", out / "curve.csv")
    if args.baseline:
        bdf = _read_forecast(_need_file(args.baseline, "baseline CSV"))
        bpred, bobs, _ = _align(bdf, truth, res)
        base = rmse_buckets(bpred, bobs, res, list(truth.pollutants), args.pooling)
        try:
            rel = relative_rmse(rep, base)
        except (ValueError, ZeroDivisionError) as exc:
            raise InputError(f"relative RMSE: {exc}") from None
        with open(out / "relative.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pollutant", "bucket", "relative_rmse"])
            for p, d in rel.items():
                for b, v in d.items():
                    w.writerow([p, b, repr(float(v))])
    for p, b, r, n in rep.rows():
        print(f"{p:5s} {b:8s} rmse={r:.4f} n={n}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# synth / plan
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    raw = _load_yaml(args.config) if args.config else {}
    try:
        cfg = SynthConfig.from_dict(raw)
        cfg.seed = _seed_override(cfg.seed)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise InputError(f"synth config: {exc}") from None
    paths = write_outputs(generate(cfg), args.out)
    for k, v in paths.items():
        print(f"{k}: {v}")
    return EXIT_OK


def cmd_plan(args) -> int:
    leads = tuple(int(x) for x in args.leads.split(","))
    print(greedy_plan(args.horizon, leads).dump(), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mvar", description="Multivariate autoregressive air-quality forecasting.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("qc", help="station quality control and city aggregation")
    p.add_argument("--stations", required=True, help="station CSV (time,station_id,city_id,lat,lon,pollutants...)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--variogram", default="auto", help="'auto' (fit per pollutant) or 'sill,range_km'")
    p.add_argument("--local-offset", type=float, default=8.0, help="UTC offset of naive timestamps (hours)")
    p.add_argument("--stats-until", default=None, help="compute normalisation statistics before this time only")
    p.set_defaults(func=cmd_qc)

    p = sub.add_parser("train", help="train one single-step model")
    p.add_argument("--config", required=True, help="YAML run config (data, model, train, out_dir, use_meteo)")
    p.add_argument("--lead", type=int, default=None, help="lead time in hours (overrides train.lead_hours)")
    p.add_argument("--out", default=None, help="checkpoint directory when the config has no out_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("forecast", help="compose lead-time models into an hourly forecast")
    p.add_argument("--checkpoints", required=True, help="directory holding lead_<h>h.mvck files")
    p.add_argument("--init", required=True, help="init time (ISO 8601; naive = local time)")
    p.add_argument("--horizon", type=int, required=True, help="forecast horizon in hours")
    p.add_argument("--history", required=True, help="QC'd city CSV covering the hours before --init")
    p.add_argument("--meteo", default=None, help="meteo grid file (meteo-coupled checkpoints only)")
    p.add_argument("--leads", default=",".join(str(x) for x in DEFAULT_LEADS), help="available lead times")
    p.add_argument("--local-offset", type=float, default=8.0, help="UTC offset of a naive --init (hours)")
    p.add_argument("--out", default="forecast", help="output directory")
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("evaluate", help="bucketed RMSE of a forecast CSV against a city CSV")
    p.add_argument("--pred", required=True, help="forecast CSV (init_time,offset_hours,city_id,pollutant,value)")
    p.add_argument("--truth", required=True, help="ground-truth city CSV")
    p.add_argument("--baseline", default=None, help="second forecast CSV for relative RMSE")
    p.add_argument("--resolution", type=int, default=None, help="step resolution in hours (default: inferred)")
    p.add_argument("--pooling", choices=("pooled", "mean_of_steps"), default="pooled")
    p.add_argument("--out", default="evaluation", help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("synth", help="generate a synthetic station / meteo / truth dataset")
    p.add_argument("--config", default=None, help="YAML generator config (defaults if omitted)")
    p.add_argument("--out", default="synth", help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("plan", help="print the greedy lead-time plan for a horizon")
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--leads", default=",".join(str(x) for x in DEFAULT_LEADS))
    p.set_defaults(func=cmd_plan)
    return ap


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MissingCheckpointError as exc:
        print(f"error: missing checkpoint for lead {exc.lead}h ({checkpoint_name(exc.lead)})", file=sys.stderr)
        return EXIT_MISSING
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except EmptyDatasetError as exc:
        print(f"error: empty result: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except MalformedRowError as exc:
        print(f"error: malformed input, {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (InputError, GridFormatError, CheckpointError, TimelineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
