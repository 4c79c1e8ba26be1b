"""
Pipeline configuration.

Dataclass sections for every pipeline stage, a JSON loader with
CLI-override precedence (CLI > file > default), and the desk-scale and
full-size model profiles.
"""
import copy
import hashlib
import json
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from src.core.errors import ConfigError

# Market constants
A_MAX = 90
NORMALIZATION_WINDOW = 60
MAX_FILL_DAYS = 5
WINDOW_LEN = 30
BATCH_SIZE = 32

NDF_PAIRS = ["USDCNY", "USDIDR", "USDINR", "USDKRW", "USDPHP", "USDTWD"]
AR_EXTRA_PAIRS = ["USDMYR"]

# Model profiles
FULL_INPUT_WIDTH = 1123
COMPRESSED_WIDTH = 90
FULL_DILATIONS = [1, 2, 1, 2, 1, 2, 1, 2]
DESK_DILATIONS = [2, 4]

DEFAULT_CONFIG_PATH = Path(__file__).parent / "config.json"
FULL_CONFIG_PATH = Path(__file__).parent / "full_config.json"


@dataclass
class IngestConfig:
    """Ingestion and normalization parameters."""
    window: int = NORMALIZATION_WINDOW
    a_max: int = A_MAX
    max_fill_days: int = MAX_FILL_DAYS
    normalize_volumes: bool = True

    def validate(self) -> None:
        if self.window < 2:
            raise ConfigError(f"ingest.window must be >= 2, got {self.window}")
        if self.a_max < 1:
            raise ConfigError(f"ingest.a_max must be >= 1, got {self.a_max}")
        if self.max_fill_days < 0:
            raise ConfigError("ingest.max_fill_days must be >= 0")


@dataclass
class IndicatorConfig:
    """Technical indicator parameters."""
    sma_windows: List[int] = field(default_factory=lambda: [7, 21])
    ema_windows: List[int] = field(default_factory=lambda: [12, 26])
    rsd_window: int = 20
    bollinger_sma_window: int = 21
    ar_order: int = 5
    ar_fit_days: int = 120
    ar_extra_pairs: List[str] = field(default_factory=lambda: list(AR_EXTRA_PAIRS))
    workers: int = 1

    def validate(self) -> None:
        windows = self.sma_windows + self.ema_windows + [self.rsd_window, self.bollinger_sma_window]
        if any(w < 1 for w in windows):
            raise ConfigError("indicator windows must be >= 1")
        if self.rsd_window < 2:
            raise ConfigError("indicators.rsd_window must be >= 2")
        if self.ar_order < 1:
            raise ConfigError("indicators.ar_order must be >= 1")
        if self.ar_fit_days < 10 * self.ar_order:
            raise ConfigError(
                f"indicators.ar_fit_days ({self.ar_fit_days}) must leave >= 10*ar_order "
                f"({10 * self.ar_order}) observations"
            )
        if self.workers < 1:
            raise ConfigError("indicators.workers must be >= 1")


@dataclass
class TenorConfig:
    """Admissible tenor set and label stream selection."""
    a_max: int = A_MAX
    train_labels: str = "optimal"
    momentum_lag: int = 90

    @property
    def n_classes(self) -> int:
        return self.a_max + 1

    def validate(self) -> None:
        if self.a_max < 1:
            raise ConfigError(f"tenor.a_max must be >= 1, got {self.a_max}")
        if self.train_labels not in ("optimal", "expert", "oracle"):
            raise ConfigError(f"tenor.train_labels must be optimal|expert|oracle, got {self.train_labels}")
        if self.momentum_lag < self.a_max:
            raise ConfigError("tenor.momentum_lag must be >= a_max so the lagged label is observable")


@dataclass
class WattNetConfig:
    """WATTNet architecture. Field names double as config-file keys."""
    input_width: Optional[int] = FULL_INPUT_WIDTH
    compressed_width: int = COMPRESSED_WIDTH
    n_blocks: int = 8
    kernel_size: int = 2
    dilation_schedule: List[int] = field(default_factory=lambda: list(FULL_DILATIONS))
    d_k: int = 16
    head_hidden: int = 512
    n_classes: int = A_MAX + 1
    window_len: int = WINDOW_LEN

    def t_progression(self) -> List[int]:
        """Sequence length before the first block and after every block."""
        lengths = [self.window_len]
        for d in self.dilation_schedule:
            lengths.append(lengths[-1] - self.kernel_size * d)
        return lengths

    @property
    def t_final(self) -> int:
        return self.t_progression()[-1]

    def validate(self) -> None:
        if self.input_width is None:
            raise ConfigError("model.input_width is unset; it is inferred from the feature panel")
        if self.input_width < 1 or self.compressed_width < 1:
            raise ConfigError("model widths must be >= 1")
        if self.n_blocks < 1:
            raise ConfigError("model.n_blocks must be >= 1")
        if self.kernel_size < 1:
            raise ConfigError("model.kernel_size must be >= 1")
        if len(self.dilation_schedule) != self.n_blocks:
            raise ConfigError(
                f"model.dilation_schedule has {len(self.dilation_schedule)} entries "
                f"for {self.n_blocks} blocks"
            )
        if any(d < 1 for d in self.dilation_schedule):
            raise ConfigError("dilations must be >= 1")
        if self.d_k < 1:
            raise ConfigError(f"model.d_k must be >= 1, got {self.d_k}")
        if self.head_hidden < 1 or self.n_classes < 2:
            raise ConfigError("model.head_hidden must be >= 1 and n_classes >= 2")
        lengths = self.t_progression()
        if min(lengths) < 1:
            raise ConfigError(
                f"dilation schedule {self.dilation_schedule} with kernel {self.kernel_size} "
                f"shrinks T below 1: {lengths}"
            )


@dataclass
class TrainConfig:
    """Optimizer and schedule."""
    lr_start: float = 6e-4
    lr_end: float = 3e-4
    batch_size: int = BATCH_SIZE
    max_epochs: int = 200
    early_stop_patience: int = 20
    early_stop_min_delta: float = 1e-4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    workers: int = 1

    def validate(self) -> None:
        if not (self.lr_start >= self.lr_end > 0):
            raise ConfigError(f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("train.max_epochs must be >= 1")
        if self.early_stop_patience < 1:
            raise ConfigError("train.early_stop_patience must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("adam betas must lie in [0, 1)")
        if self.workers < 1:
            raise ConfigError("train.workers must be >= 1")


@dataclass
class BacktestConfig:
    """Backtest policy selection."""
    policy: str = "all"

    POLICIES = ("model", "optimal", "oracle", "expert", "momentum1", "momentum90", "no_trade", "all")

    def validate(self) -> None:
        if self.policy not in self.POLICIES:
            raise ConfigError(f"backtest.policy must be one of {self.POLICIES}, got {self.policy}")


@dataclass
class ExplainConfig:
    """Input-gradient attribution settings."""
    target_class: Optional[int] = None
    mode: str = "label"
    top_k: int = 6
    volatility_window: int = 20

    def validate(self) -> None:
        if self.mode not in ("label", "predicted"):
            raise ConfigError(f"explain.mode must be label|predicted, got {self.mode}")
        if self.top_k < 1:
            raise ConfigError("explain.top_k must be >= 1")


@dataclass
class SynthConfig:
    """Synthetic market regimes."""
    days: int = 900
    n_pairs: int = 8
    n_ndf_pairs: int = 2
    start_date: str = "2013-09-10"
    drift: float = 0.0
    volatility: float = 0.004
    regime_length: int = 60
    regime_drift: float = 0.0015
    n_trends: int = 3
    trend_length: int = 120
    trend_drift: float = 0.003
    records_per_day: float = 6.0
    tenor_scale: float = 15.0
    long_tenor_prob: float = 0.02

    def validate(self) -> None:
        if self.days < 300:
            raise ConfigError(f"synth.days must be >= 300, got {self.days}")
        if self.n_pairs < 1 or not (0 <= self.n_ndf_pairs <= min(self.n_pairs, len(NDF_PAIRS))):
            raise ConfigError("synth.n_pairs must be >= 1 and n_ndf_pairs within [0, min(n_pairs, 6)]")
        if self.volatility < 0 or self.records_per_day < 0 or self.tenor_scale <= 0:
            raise ConfigError("synth volatility/records_per_day must be >= 0 and tenor_scale > 0")
        if self.regime_length < 1 or self.trend_length < 1 or self.n_trends < 0:
            raise ConfigError("synth regime_length/trend_length must be >= 1 and n_trends >= 0")
        if not (0 <= self.long_tenor_prob <= 1):
            raise ConfigError("synth.long_tenor_prob must lie in [0, 1]")


@dataclass
class RunConfig:
    """Top-level experiment record."""
    out_dir: str = "runs/default"
    seed: int = 0
    target_pair: str = "USDCNY"
    split_date: Optional[str] = None
    spot_file: str = "spot.csv"
    ndf_file: str = "ndf.csv"
    aligned_spot_file: str = "spot_aligned.csv"
    volume_file: str = "volumes.csv"
    raw_panel_file: str = "panel_raw.csv"
    panel_file: str = "panel.csv"
    label_file: str = "labels_{kind}.csv"
    checkpoint_file: str = "model.ckpt"
    train_report_file: str = "train_report.json"
    epoch_log_file: str = "epochs.jsonl"
    backtest_file: str = "backtest_{policy}"
    comparison_file: str = "backtest_comparison.csv"
    grad_report_file: str = "grad_report.json"
    volatility_file: str = "volatility.csv"
    latent_file: str = "latents.csv"
    log_level: str = "INFO"
    log_json: bool = False
    log_file: Optional[str] = None

    ingest: IngestConfig = None
    indicators: IndicatorConfig = None
    tenor: TenorConfig = None
    model: WattNetConfig = None
    train: TrainConfig = None
    backtest: BacktestConfig = None
    explain: ExplainConfig = None
    synth: SynthConfig = None

    def __post_init__(self):
        if self.ingest is None:
            self.ingest = IngestConfig()
        if self.indicators is None:
            self.indicators = IndicatorConfig()
        if self.tenor is None:
            self.tenor = TenorConfig()
        if self.model is None:
            self.model = desk_profile()
        if self.train is None:
            self.train = TrainConfig(max_epochs=50)
        if self.backtest is None:
            self.backtest = BacktestConfig()
        if self.explain is None:
            self.explain = ExplainConfig()
        if self.synth is None:
            self.synth = SynthConfig()

    def path(self, name: str, **fmt: str) -> Path:
        """Resolve an artifact file name under ``out_dir``."""
        template = getattr(self, f"{name}_file")
        return Path(self.out_dir) / template.format(**fmt)

    def validate(self) -> None:
        if self.ingest.a_max != self.tenor.a_max:
            raise ConfigError("ingest.a_max and tenor.a_max must agree")
        if self.model.n_classes != self.tenor.n_classes:
            raise ConfigError(
                f"model.n_classes ({self.model.n_classes}) must equal a_max + 1 ({self.tenor.n_classes})"
            )
        if self.log_level.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ConfigError(f"unknown log_level {self.log_level}")
        for section in (self.ingest, self.indicators, self.tenor, self.train,
                        self.backtest, self.explain, self.synth):
            section.validate()
        # input_width may still be inferred from the panel
        if self.model.input_width is not None:
            self.model.validate()
        else:
            template = copy.deepcopy(self.model)
            template.input_width = 1
            template.validate()

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        """sha256 over the canonical JSON form."""
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def desk_profile(input_width: Optional[int] = None) -> WattNetConfig:
    """Two WATTBlocks at T=30, M=90; runs on a laptop CPU."""
    return WattNetConfig(
        input_width=input_width,
        compressed_width=COMPRESSED_WIDTH,
        n_blocks=2,
        kernel_size=2,
        dilation_schedule=list(DESK_DILATIONS),
        d_k=16,
        head_hidden=512,
        n_classes=A_MAX + 1,
        window_len=WINDOW_LEN,
    )


def full_profile() -> WattNetConfig:
    """Eight WATTBlocks over the full 1123-wide feature panel."""
    return WattNetConfig()


_SECTIONS = {
    "ingest": IngestConfig,
    "indicators": IndicatorConfig,
    "tenor": TenorConfig,
    "model": WattNetConfig,
    "train": TrainConfig,
    "backtest": BacktestConfig,
    "explain": ExplainConfig,
    "synth": SynthConfig,
}


def _build_section(cls, values: Mapping[str, Any], base=None):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    merged = asdict(base) if base is not None else {}
    merged.update(values)
    return cls(**merged)


def _coerce(raw: str) -> Any:
    """Parse a CLI override value as JSON, falling back to the raw string."""
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_overrides(pairs: List[str]) -> Dict[str, Any]:
    """Turn ``["train.max_epochs=10", "seed=3"]`` into a dotted-key dict."""
    overrides: Dict[str, Any] = {}
    for item in pairs:
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        overrides[key.strip()] = _coerce(raw.strip())
    return overrides


def config_from_dict(data: Mapping[str, Any]) -> RunConfig:
    """Build a RunConfig from nested dictionaries, validating keys."""
    top_known = {f.name for f in fields(RunConfig)}
    unknown = set(data) - top_known
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")

    base = RunConfig()
    kwargs: Dict[str, Any] = {}
    for f in fields(RunConfig):
        if f.name not in data:
            continue
        value = data[f.name]
        if f.name in _SECTIONS:
            if not isinstance(value, Mapping):
                raise ConfigError(f"config section {f.name} must be an object")
            kwargs[f.name] = _build_section(_SECTIONS[f.name], value, getattr(base, f.name))
        else:
            kwargs[f.name] = value
    return RunConfig(**kwargs)


def load_config(
    path: Optional[str] = None,
    overrides: Optional[Mapping[str, Any]] = None
) -> RunConfig:
    """
    Load configuration with precedence CLI override > file > default.

    Args:
        path: JSON config file (None for built-in defaults)
        overrides: dotted keys, e.g. ``{"train.max_epochs": 10, "seed": 3}``

    Returns:
        Validated RunConfig
    """
    data: Dict[str, Any] = {}
    if path is not None:
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigError(f"config file not found: {config_path}")
        try:
            data = json.loads(config_path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{config_path}: invalid JSON ({e})") from e

    for key, value in (overrides or {}).items():
        parts = key.split(".")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key} descends into a non-section")
        node[parts[-1]] = value

    config = config_from_dict(data)
    config.validate()
    return config


def with_input_width(model: WattNetConfig, width: int) -> WattNetConfig:
    """
    Copy of ``model`` with the input width filled in from the panel.

    The compressed width is capped at the panel width.
    """
    if model.input_width is not None and model.input_width != width:
        raise ConfigError(f"model.input_width={model.input_width} but the panel has {width} columns")
    resolved = copy.deepcopy(model)
    resolved.input_width = width
    resolved.compressed_width = min(resolved.compressed_width, width)
    resolved.validate()
    return resolved
