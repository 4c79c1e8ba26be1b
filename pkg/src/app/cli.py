"""
Command-Line Pipeline
synth -> ingest -> features -> label -> train -> backtest / explain / export-latents

Every command reads its upstream artifacts from ``out_dir``, writes its
outputs there and leaves a manifest beside each output. Exit codes:
0 success, 2 parse, 3 validation, 4 config, 5 shape/compute, 6 artifact,
1 unexpected.
"""
import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from config.config import (DEFAULT_CONFIG_PATH, RunConfig, WattNetConfig, load_config,
                           parse_overrides, with_input_width)
from config.env_config import EnvConfig
from src.core import backtest as bt
from src.core.errors import ConfigError, NdfError, ShapeError, ValidationError
from src.core.explain import (correlation_table, export_latents, input_gradients,
                              volatility_context, write_grad_report)
from src.core.indicators import build_indicator_panel
from src.core.labels import (LabelKind, TenorSet, expert_labels, label_distribution, optimal_labels,
                             oracle_labels, read_labels, window_dataset, write_labels)
from src.core.logging_utils import EpochLogger, setup_logging
from src.core.training import evaluate_policy, train
from src.core.wattnet import describe
from src.data.ingest import (ColumnGroup, FLOAT_FORMAT, SpotSeries, aggregate_volumes, align_panel,
                             align_spots, cubes_to_panel, panel_to_cubes, parse_ndf_records,
                             parse_spot_csv, read_panel, rolling_normalize, write_panel, write_spot_csv)
from src.data.synth import MarketSimulator, write_market
from src.utils.checkpoint import load_checkpoint, save_checkpoint
from src.utils.manifest import require_artifact, write_manifest

logger = logging.getLogger(__name__)

ALL_POLICIES = ["model", "optimal", "oracle", "expert", "momentum1", "momentum90", "no_trade"]


def _manifest(cfg: RunConfig, output: Path, command: str, inputs: Sequence[Path] = (),
              extra: Optional[Dict[str, Any]] = None) -> Path:
    return write_manifest(str(output), command, [str(p) for p in inputs], cfg.config_hash(),
                          root=cfg.out_dir, extra=extra)


def _json_safe(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_json_safe(v) for v in value]
    return value


def _require_split(cfg: RunConfig) -> str:
    if cfg.split_date is None:
        raise ConfigError("split_date is required; set it in the config file or pass --split-date")
    return cfg.split_date


def _find_spot(spots: Sequence[SpotSeries], pair: str) -> SpotSeries:
    for s in spots:
        if s.pair_name == pair:
            return s
    raise ConfigError(f"target pair {pair} is not in the spot data ({', '.join(s.pair_name for s in spots)})")


def _labels(cfg: RunConfig, kind: str):
    path = require_artifact(cfg.path("label", kind=kind), "label")
    return read_labels(str(path), LabelKind(kind)), path


def _panel(cfg: RunConfig, name: str = "panel"):
    path = require_artifact(cfg.path(name), "features")
    return read_panel(str(path)), path


def _checkpoint(cfg: RunConfig):
    path = require_artifact(cfg.path("checkpoint"), "train")
    return load_checkpoint(str(path)), path


def _resolve_model(cfg: RunConfig, width: int) -> WattNetConfig:
    """Fill the input width from the panel; M never exceeds it."""
    resolved = with_input_width(cfg.model, width)
    if resolved.compressed_width < cfg.model.compressed_width:
        logger.info(f"compressed_width {cfg.model.compressed_width} capped at the panel width {width}")
    return resolved


def cmd_synth(cfg: RunConfig, args: argparse.Namespace) -> List[Path]:
    """Generate spot and NDF files for a synthetic market."""
    market = MarketSimulator(cfg.synth, cfg.seed, cfg.tenor.a_max).generate()
    spot_path, ndf_path = cfg.path("spot"), cfg.path("ndf")
    write_market(market, str(spot_path), str(ndf_path))
    extra = {
        "ndf_pairs": market.ndf_pairs,
        "trends": [{"start": t.start, "length": t.length} for t in market.trends],
        "records": len(market.records),
    }
    for path in (spot_path, ndf_path):
        _manifest(cfg, path, "synth", extra=extra)
    return [spot_path, ndf_path]


def cmd_ingest(cfg: RunConfig, args: argparse.Namespace) -> List[Path]:
    """Align spot series and aggregate NDF volumes per tenor."""
    spot_in = Path(args.spot) if args.spot else require_artifact(cfg.path("spot"), "synth")
    ndf_in = Path(args.ndf) if args.ndf else require_artifact(cfg.path("ndf"), "synth")
    spots = parse_spot_csv(str(spot_in))
    records = parse_ndf_records(str(ndf_in))

    calendar, aligned = align_spots(spots, cfg.ingest.max_fill_days)
    known = {s.pair_name for s in aligned}
    ndf_pairs = sorted({r.pair_name for r in records})
    if not ndf_pairs:
        raise ValidationError(f"{ndf_in}: no NDF records")
    missing = [p for p in ndf_pairs if p not in known]
    if missing:
        raise ValidationError(f"NDF pairs without spot rates: {missing}")
    cubes = [aggregate_volumes(records, calendar, cfg.ingest.a_max, p) for p in ndf_pairs]

    aligned_path, volume_path = cfg.path("aligned_spot"), cfg.path("volume")
    write_spot_csv(aligned, str(aligned_path))
    write_panel(cubes_to_panel(cubes), str(volume_path))
    extra = {
        "calendar_days": int(len(calendar)),
        "dropped_long": {c.pair_name: c.dropped_long for c in cubes},
        "dropped_off_calendar": {c.pair_name: c.dropped_off_calendar for c in cubes},
    }
    _manifest(cfg, aligned_path, "ingest", [spot_in], extra)
    _manifest(cfg, volume_path, "ingest", [spot_in, ndf_in], extra)
    return [aligned_path, volume_path]


def cmd_features(cfg: RunConfig, args: argparse.Namespace) -> List[Path]:
    """Indicators, panel alignment and rolling normalization."""
    spot_path = require_artifact(cfg.path("aligned_spot"), "ingest")
    volume_path = require_artifact(cfg.path("volume"), "ingest")
    spots = parse_spot_csv(str(spot_path))
    cubes = panel_to_cubes(read_panel(str(volume_path)))
    ic = cfg.indicators

    indicators = build_indicator_panel(
        spots, [c.pair_name for c in cubes], ic.ar_extra_pairs, ic.ar_order, ic.ar_fit_days,
        ic.sma_windows, ic.ema_windows, ic.rsd_window, ic.bollinger_sma_window, ic.workers,
    )
    raw = align_panel(spots, indicators, cubes, cfg.ingest.max_fill_days)
    raw.metadata.update(indicators.metadata)
    normalized, _ = rolling_normalize(raw, cfg.ingest.window)
    if not cfg.ingest.normalize_volumes:
        window = cfg.ingest.window
        volume_cols = [j for j, c in enumerate(raw.columns) if c.group is ColumnGroup.VOLUME]
        normalized.values[:, volume_cols] = raw.values[window - 1:, volume_cols]
        normalized.metadata["volumes_normalized"] = False

    raw_path, panel_path = cfg.path("raw_panel"), cfg.path("panel")
    write_panel(raw, str(raw_path))
    write_panel(normalized, str(panel_path))
    extra = {"width": normalized.width, "rows": int(len(normalized.dates))}
    _manifest(cfg, raw_path, "features", [spot_path, volume_path], extra)
    _manifest(cfg, panel_path, "features", [spot_path, volume_path], extra)
    return [raw_path, panel_path]


def cmd_label(cfg: RunConfig, args: argparse.Namespace) -> List[Path]:
    """Optimal, expert and oracle label streams for the target pair."""
    spot_path = require_artifact(cfg.path("aligned_spot"), "ingest")
    volume_path = require_artifact(cfg.path("volume"), "ingest")
    target = _find_spot(parse_spot_csv(str(spot_path)), cfg.target_pair)
    cubes = {c.pair_name: c for c in panel_to_cubes(read_panel(str(volume_path)))}
    if cfg.target_pair not in cubes:
        raise ConfigError(f"target pair {cfg.target_pair} has no NDF volumes; expert labels need them")
    cube = cubes[cfg.target_pair]
    tenors = TenorSet(cfg.tenor.a_max)

    streams = {
        LabelKind.OPTIMAL: (optimal_labels(target, tenors), [spot_path]),
        LabelKind.EXPERT: (expert_labels(cube), [volume_path]),
        LabelKind.ORACLE: (oracle_labels(target, tenors), [spot_path]),
    }
    outputs = []
    for kind, (labels, inputs) in streams.items():
        path = cfg.path("label", kind=kind.value)
        write_labels(labels, str(path))
        extra = {"distribution": label_distribution(labels, tenors).tolist(), "days": len(labels)}
        if kind is LabelKind.EXPERT:
            extra["no_volume_days"] = int((cube.volumes.max(axis=1) <= 0).sum())
        _manifest(cfg, path, "label", inputs, extra)
        outputs.append(path)
    return outputs


def cmd_train(cfg: RunConfig, args: argparse.Namespace) -> List[Path]:
    """Fit WATTNet on windows dated before the split."""
    split = _require_split(cfg)
    panel, panel_path = _panel(cfg)
    labels, label_path = _labels(cfg, cfg.tenor.train_labels)
    dataset = window_dataset(panel, labels, cfg.model.window_len).fence_before(split)
    if len(dataset) == 0:
        raise ValidationError(f"no training windows dated before {split}")
    model_cfg = _resolve_model(cfg, panel.width)

    epoch_path = cfg.path("epoch_log")
    params, report = train(model_cfg, dataset, cfg.train, fence_date=split,
                           epoch_log=EpochLogger(str(epoch_path)))
    ckpt_path = save_checkpoint(params, str(cfg.path("checkpoint")))
    report.checkpoint = ckpt_path.name
    report_path = cfg.path("train_report")
    report_path.write_text(json.dumps(_json_safe(report.to_dict(include_timing=False)), indent=2,
                                      sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Training wall clock {report.wall_clock_seconds:.1f}s")

    inputs = [panel_path, label_path]
    _manifest(cfg, ckpt_path, "train", inputs, describe(params.config))
    _manifest(cfg, report_path, "train", inputs)
    _manifest(cfg, epoch_path, "train", inputs)
    return [ckpt_path, report_path, epoch_path]


def _no_trade(day) -> int:
    return 0


def cmd_backtest(cfg: RunConfig, args: argparse.Namespace) -> List[Path]:
    """Score the model and the baselines on the test period."""
    split = _require_split(cfg)
    tenors = TenorSet(cfg.tenor.a_max)
    spot_path = require_artifact(cfg.path("aligned_spot"), "ingest")
    target = _find_spot(parse_spot_csv(str(spot_path)), cfg.target_pair)
    panel, panel_path = _panel(cfg)
    streams = {kind: _labels(cfg, kind.value) for kind in LabelKind}
    inputs = [spot_path, panel_path] + [path for _, path in streams.values()]

    def model_policy():
        params, ckpt_path = _checkpoint(cfg)
        if params.config.input_width != panel.width:
            raise ShapeError(f"checkpoint expects {params.config.input_width} features, panel has {panel.width}")
        inputs.append(ckpt_path)
        optimal = streams[LabelKind.OPTIMAL][0]
        return evaluate_policy(params, window_dataset(panel, optimal, params.config.window_len))

    builders: Dict[str, Callable[[], Any]] = {
        "model": model_policy,
        "optimal": lambda: bt.policy_from_labels(streams[LabelKind.OPTIMAL][0], "optimal"),
        "oracle": lambda: bt.policy_from_labels(streams[LabelKind.ORACLE][0], "oracle"),
        "expert": lambda: bt.policy_from_labels(streams[LabelKind.EXPERT][0], "expert"),
        "momentum1": lambda: bt.momentum1(streams[LabelKind.EXPERT][0]),
        "momentum90": lambda: bt.momentum90(target, tenors, cfg.tenor.momentum_lag),
        "no_trade": lambda: _no_trade,
    }
    names = ALL_POLICIES if cfg.backtest.policy == "all" else [cfg.backtest.policy]

    reports, outputs = [], []
    for name in names:
        report = bt.run_backtest(builders[name](), target, split, tenors, panel,
                                 cfg.model.window_len, name=name)
        reports.append(report)
        for path in bt.write_report(report, str(cfg.path("backtest", policy=name))):
            _manifest(cfg, path, "backtest", inputs)
            outputs.append(path)

    if len(reports) > 1:
        comparison_path = bt.write_comparison(bt.compare_policies(reports), str(cfg.path("comparison")))
        stats = _json_safe(bt.market_statistics(target, split))
        _manifest(cfg, comparison_path, "backtest", inputs, {"market_statistics": stats})
        outputs.append(comparison_path)
    return outputs


def cmd_explain(cfg: RunConfig, args: argparse.Namespace) -> List[Path]:
    """Input-gradient ranking with correlation and volatility context."""
    params, ckpt_path = _checkpoint(cfg)
    panel, panel_path = _panel(cfg)
    raw, raw_path = _panel(cfg, "raw_panel")
    labels, label_path = _labels(cfg, cfg.tenor.train_labels)
    dataset = window_dataset(panel, labels, params.config.window_len)
    ec = cfg.explain

    report = input_gradients(params, dataset, ec.target_class, ec.mode, feature_names=panel.names)
    top = [row["feature"] for row in report.top(ec.top_k)]
    extra: Dict[str, Any] = {"target_pair": cfg.target_pair}
    if cfg.split_date is not None:
        table = correlation_table(raw, cfg.target_pair, top, cfg.split_date)
        extra["correlations"] = _json_safe(table.to_dict(orient="records"))
    grad_path = write_grad_report(report, str(cfg.path("grad_report")), ec.top_k, extra)

    vol_path = cfg.path("volatility")
    rsd = volatility_context(raw.column(cfg.target_pair), ec.volatility_window)
    pd.DataFrame({
        "date": pd.DatetimeIndex(np.asarray(raw.dates, dtype="datetime64[ns]")).strftime("%Y-%m-%d"),
        "rsd": rsd,
    }).to_csv(vol_path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n", na_rep="")

    inputs = [ckpt_path, panel_path, raw_path, label_path]
    _manifest(cfg, grad_path, "explain", inputs)
    _manifest(cfg, vol_path, "explain", [raw_path])
    return [grad_path, vol_path]


def cmd_export_latents(cfg: RunConfig, args: argparse.Namespace) -> List[Path]:
    """Final-block latents of every window for external embedding."""
    params, ckpt_path = _checkpoint(cfg)
    panel, panel_path = _panel(cfg)
    labels, label_path = _labels(cfg, cfg.tenor.train_labels)
    dataset = window_dataset(panel, labels, params.config.window_len)
    out = export_latents(params, dataset, str(cfg.path("latent")))
    _manifest(cfg, out, "export-latents", [ckpt_path, panel_path, label_path])
    return [out]


COMMANDS: Dict[str, Callable[[RunConfig, argparse.Namespace], List[Path]]] = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "features": cmd_features,
    "label": cmd_label,
    "train": cmd_train,
    "backtest": cmd_backtest,
    "explain": cmd_explain,
    "export-latents": cmd_export_latents,
}

# subcommand flag -> dotted config key
_FLAG_KEYS = {
    "split_date": "split_date",
    "epochs": "train.max_epochs",
    "policy": "backtest.policy",
    "target_class": "explain.target_class",
    "mode": "explain.mode",
    "top_k": "explain.top_k",
    "days": "synth.days",
    "pairs": "synth.n_pairs",
    "ndf_pairs": "synth.n_ndf_pairs",
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ndf-tenor", description="NDF tenor selection pipeline")
    parser.add_argument("--config", help=f"JSON config file (default {DEFAULT_CONFIG_PATH.name})")
    parser.add_argument("--seed", type=int, help="seed for synthesis, initialization and shuffling")
    parser.add_argument("--out-dir", help="artifact directory")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="config override, e.g. train.max_epochs=10 (repeatable)")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING, ERROR")
    parser.add_argument("--json-logs", action="store_true", help="emit JSON log lines")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic market")
    p.add_argument("--days", type=int)
    p.add_argument("--pairs", type=int)
    p.add_argument("--ndf-pairs", type=int)

    p = sub.add_parser("ingest", help="parse and align raw inputs")
    p.add_argument("--spot", help="spot CSV (default: synth output)")
    p.add_argument("--ndf", help="NDF record CSV (default: synth output)")

    sub.add_parser("features", help="indicators and normalized panel")
    sub.add_parser("label", help="optimal, expert and oracle labels")

    p = sub.add_parser("train", help="train WATTNet")
    p.add_argument("--split-date")
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("backtest", help="score policies on the test period")
    p.add_argument("--split-date")
    p.add_argument("--policy", choices=ALL_POLICIES + ["all"])

    p = sub.add_parser("explain", help="input-gradient feature ranking")
    p.add_argument("--split-date")
    p.add_argument("--target-class", type=int)
    p.add_argument("--mode", choices=["label", "predicted"])
    p.add_argument("--top-k", type=int)

    sub.add_parser("export-latents", help="write final-block latents")
    return parser


def collect_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """Environment, then --set, then explicit flags; later wins."""
    overrides: Dict[str, Any] = dict(EnvConfig.overrides())
    overrides.update(parse_overrides(args.set))
    if args.seed is not None:
        overrides["seed"] = args.seed
        overrides["train.seed"] = args.seed
    if args.out_dir:
        overrides["out_dir"] = args.out_dir
    if args.log_level:
        overrides["log_level"] = args.log_level
    if args.json_logs:
        overrides["log_json"] = True
    for flag, key in _FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return overrides


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging("src")
    try:
        config_path = args.config or (str(DEFAULT_CONFIG_PATH) if DEFAULT_CONFIG_PATH.exists() else None)
        cfg = load_config(config_path, collect_overrides(args))
        setup_logging("src", cfg.log_file, cfg.log_level, enable_json=cfg.log_json,
                      context={"command": args.command, "config_hash": cfg.config_hash()[:12]})
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        logger.info(f"{args.command}: out_dir={cfg.out_dir} config={cfg.config_hash()[:12]}")
        for path in COMMANDS[args.command](cfg, args):
            logger.info(f"wrote {path}")
        return 0
    except NdfError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception:
        logger.exception(f"{args.command} failed unexpectedly")
        return 1


if __name__ == "__main__":
    sys.exit(main())
