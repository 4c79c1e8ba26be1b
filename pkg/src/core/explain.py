"""
Explainability
Input-gradient feature importance, Pearson correlation context, rolling
volatility context and latent export for external embedding tools.
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from src.core.errors import ValidationError
from src.core.indicators import rolling_std
from src.core.labels import WindowedDataset
from src.core.wattnet import ModelParams, build_graph, forward, logits_with_input_grad
from src.data.ingest import FLOAT_FORMAT, AlignedPanel

logger = logging.getLogger(__name__)

MODES = ("label", "predicted")


@dataclass
class GradReport:
    """Per-feature importance G_j = mean over samples of |sum_t dL/dx_jt| / T."""
    importance: np.ndarray
    ranking: np.ndarray
    n_samples: int
    target_class: Optional[int]
    mode: str
    loss_scale: float = 1.0
    feature_names: List[str] = field(default_factory=list)

    def top(self, k: int = 6) -> List[Dict[str, Any]]:
        rows = []
        for rank, j in enumerate(self.ranking[:k]):
            rows.append({
                "rank": rank + 1,
                "feature": self.feature_names[j] if self.feature_names else int(j),
                "index": int(j),
                "importance": float(self.importance[j]),
            })
        return rows

    def to_dict(self, top_k: int = 6) -> Dict[str, Any]:
        return {
            "mode": self.mode,
            "target_class": self.target_class,
            "n_samples": self.n_samples,
            "loss_scale": self.loss_scale,
            "top": self.top(top_k),
            "importance": [float(v) for v in self.importance],
            "ranking": [int(j) for j in self.ranking],
        }


def _select(params: ModelParams, dataset: WindowedDataset, target_class: Optional[int],
            mode: str, batch_size: int):
    """Windows and cross-entropy targets for the requested mode."""
    windows, labels = dataset.windows, dataset.labels
    if mode == "predicted":
        preds = np.concatenate([
            np.argmax(forward(params, windows[lo:lo + batch_size]), axis=1)
            for lo in range(0, len(windows), batch_size)
        ])
        keep = np.ones(len(windows), dtype=bool) if target_class is None else preds == target_class
        return windows[keep], preds[keep]
    keep = np.ones(len(windows), dtype=bool) if target_class is None else labels == target_class
    return windows[keep], labels[keep]


def input_gradients(
    params: ModelParams,
    dataset: WindowedDataset,
    target_class: Optional[int] = None,
    mode: str = "label",
    loss_scale: float = 1.0,
    batch_size: int = 64,
    feature_names: Optional[Sequence[str]] = None
) -> GradReport:
    """
    Gradient magnitude of the cross-entropy with respect to each input series.

    Args:
        params: trained parameters
        dataset: windows with labels
        target_class: restrict to samples whose label (or prediction, in
            predicted mode) is this class
        mode: "label" targets the true label, "predicted" the model's argmax
        loss_scale: positive multiplier on the loss
        batch_size: windows per backward pass

    Returns:
        GradReport with importance averaged over the selected samples
    """
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
    if loss_scale <= 0:
        raise ValidationError(f"loss_scale must be > 0, got {loss_scale}")
    windows, targets = _select(params, dataset, target_class, mode, batch_size)
    if len(windows) == 0:
        what = "labeled" if mode == "label" else "predicted"
        raise ValidationError(f"no samples {what} as class {target_class}")

    t_len = windows.shape[1]
    total = np.zeros(windows.shape[2])
    for lo in range(0, len(windows), batch_size):
        batch, batch_targets = windows[lo:lo + batch_size], targets[lo:lo + batch_size]
        _, grad = logits_with_input_grad(params, batch, batch_targets, loss_scale)
        # per-sample |sum over t| before averaging, so samples cannot cancel
        total += (np.abs(grad.sum(axis=1)) / t_len).sum(axis=0)
    importance = total / len(windows)

    names = list(feature_names) if feature_names is not None else []
    if names and len(names) != len(importance):
        raise ValidationError(f"{len(names)} feature names for {len(importance)} input series")
    report = GradReport(
        importance=importance,
        ranking=np.argsort(-importance, kind="stable"),
        n_samples=int(len(windows)),
        target_class=target_class,
        mode=mode,
        loss_scale=loss_scale,
        feature_names=names,
    )
    logger.info(f"Input gradients over {report.n_samples} samples ({mode} mode, class {target_class})")
    return report


def pearson_corr(x: Sequence[float], y: Sequence[float]) -> float:
    """Product-moment correlation of two equal-length series."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError(f"series shapes differ: {x.shape} vs {y.shape}")
    if len(x) < 2:
        raise ValidationError("correlation needs at least two observations")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValidationError("correlation undefined for a zero-variance series")
    rho = stats.pearsonr(x, y)[0]
    return float(np.clip(rho, -1.0, 1.0))


def volatility_context(x: Sequence[float], window: int = 20) -> np.ndarray:
    """Rolling standard deviation, as used for the volatility overlay."""
    return rolling_std(x, window)


def correlation_table(
    panel: AlignedPanel,
    target: str,
    features: Sequence[str],
    split_date: str
) -> pd.DataFrame:
    """Pearson rho between ``target`` and each feature, train and test periods separately."""
    split = np.datetime64(split_date, "D")
    train_mask = panel.dates < split
    y = panel.column(target)
    rows = []
    for name in features:
        x = panel.column(name)
        row = {"feature": name}
        for period, mask in (("train", train_mask), ("test", ~train_mask)):
            try:
                row[f"rho_{period}"] = pearson_corr(x[mask], y[mask])
            except ValidationError as e:
                logger.warning(f"rho({target}, {name}) undefined in {period} period: {e}")
                row[f"rho_{period}"] = float("nan")
        rows.append(row)
    return pd.DataFrame(rows, columns=["feature", "rho_train", "rho_test"])


def latent_table(params: ModelParams, dataset: WindowedDataset, batch_size: int = 64) -> pd.DataFrame:
    """One row per sample: date, predicted class, label and the flattened final latent."""
    if len(dataset) == 0:
        raise ValidationError("no samples to export")
    latents, preds = [], []
    for lo in range(0, len(dataset), batch_size):
        graph = build_graph(params, dataset.windows[lo:lo + batch_size], trainable=False)
        latents.append(graph.latent.value.reshape(graph.latent.shape[0], -1))
        preds.append(np.argmax(graph.logits.value, axis=1))
    z = np.concatenate(latents)
    frame = pd.DataFrame(z, columns=[f"z_{i}" for i in range(z.shape[1])])
    frame.insert(0, "label", dataset.labels)
    frame.insert(0, "pred", np.concatenate(preds))
    frame.insert(0, "sample_date",
                 pd.DatetimeIndex(np.asarray(dataset.dates, dtype="datetime64[ns]")).strftime("%Y-%m-%d"))
    return frame


def export_latents(params: ModelParams, dataset: WindowedDataset, path: str, batch_size: int = 64) -> Path:
    """Write ``sample_date,pred,label,z_0,...`` at 17 significant digits."""
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    table = latent_table(params, dataset, batch_size)
    table.to_csv(out, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info(f"Exported {len(table)} latent rows of width {table.shape[1] - 3} to {out}")
    return out


def write_grad_report(report: GradReport, path: str, top_k: int = 6,
                      extra: Optional[Dict[str, Any]] = None) -> Path:
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    data = report.to_dict(top_k)
    data.update(extra or {})
    out.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out
