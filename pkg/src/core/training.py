"""
Imitation Training
Adam with a cosine learning-rate decay over seeded, shuffled minibatches
of windows, with early stopping on the training loss.
"""
import logging
import math
import time
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Tuple

import numpy as np

from config.config import TrainConfig, WattNetConfig
from src.core.errors import ComputeError, ValidationError
from src.core.labels import WindowedDataset
from src.core.logging_utils import EpochLogger
from src.core.wattnet import ModelParams, describe, init_params, loss_and_grads, predict_batch

logger = logging.getLogger(__name__)

STOP_MAX_EPOCHS = "max_epochs"
STOP_EARLY = "early_stop"
STOP_DIVERGED = "diverged"


def cosine_lr(step: int, total_steps: int, lr_start: float = 6e-4, lr_end: float = 3e-4) -> float:
    """lr_end + 0.5*(lr_start - lr_end)*(1 + cos(pi*step/total_steps))."""
    if total_steps <= 0:
        raise ValidationError(f"cosine schedule needs total_steps > 0, got {total_steps}")
    if not 0 <= step <= total_steps:
        raise ValidationError(f"step {step} outside [0, {total_steps}]")
    return lr_end + 0.5 * (lr_start - lr_end) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    """First/second moment estimates and the step counter."""
    m: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
    v: Dict[str, np.ndarray] = field(default_factory=OrderedDict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls(
            OrderedDict((k, np.zeros_like(np.asarray(p, dtype=np.float64))) for k, p in params.items()),
            OrderedDict((k, np.zeros_like(np.asarray(p, dtype=np.float64))) for k, p in params.items()),
        )


def adam_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8
) -> Tuple["OrderedDict[str, np.ndarray]", AdamState]:
    """
    One bias-corrected Adam update.

    Returns new parameter and state objects; the inputs are left untouched.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise ComputeError(f"non-finite gradient for {name} at step {state.step + 1}")
    if set(grads) != set(params):
        raise ValidationError("gradient names do not match parameter names")

    step = state.step + 1
    correction1 = 1.0 - beta1 ** step
    correction2 = 1.0 - beta2 ** step
    new_params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    new_state = AdamState(OrderedDict(), OrderedDict(), step)
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != np.shape(p):
            raise ValidationError(f"{name}: gradient shape {g.shape} != parameter shape {np.shape(p)}")
        m = beta1 * state.m[name] + (1.0 - beta1) * g
        v = beta2 * state.v[name] + (1.0 - beta2) * g * g
        new_state.m[name] = m
        new_state.v[name] = v
        new_params[name] = p - lr * (m / correction1) / (np.sqrt(v / correction2) + eps)
    return new_params, new_state


@dataclass
class TrainReport:
    """Outcome of one training run."""
    epoch_losses: List[float] = field(default_factory=list)
    best_loss: float = float("inf")
    best_epoch: int = -1
    stop_epoch: int = 0
    stop_reason: str = STOP_MAX_EPOCHS
    steps: int = 0
    total_steps: int = 0
    n_samples: int = 0
    seed: int = 0
    train_accuracy: Optional[float] = None
    model: Dict[str, Any] = field(default_factory=dict)
    checkpoint: Optional[str] = None
    wall_clock_seconds: float = 0.0

    def to_dict(self, include_timing: bool = True) -> Dict[str, Any]:
        """JSON-ready form; without timing the dict is reproducible."""
        data = {
            "epoch_losses": list(self.epoch_losses),
            "best_loss": self.best_loss,
            "best_epoch": self.best_epoch,
            "stop_epoch": self.stop_epoch,
            "stop_reason": self.stop_reason,
            "steps": self.steps,
            "total_steps": self.total_steps,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "train_accuracy": self.train_accuracy,
            "model": self.model,
            "checkpoint": self.checkpoint,
        }
        if include_timing:
            data["wall_clock_seconds"] = self.wall_clock_seconds
        return data


def _batch_grads(
    params: ModelParams,
    windows: np.ndarray,
    labels: np.ndarray,
    workers: int,
    pool: Optional[ThreadPoolExecutor]
) -> Tuple[float, "OrderedDict[str, np.ndarray]"]:
    """Mean loss and gradients, optionally summed over shards in a fixed order."""
    n = len(labels)
    if pool is None or workers <= 1 or n < 2:
        return loss_and_grads(params, windows, labels)

    shards = [s for s in np.array_split(np.arange(n), min(workers, n)) if len(s)]
    results = list(pool.map(lambda idx: loss_and_grads(params, windows[idx], labels[idx], "sum"), shards))
    total_loss = 0.0
    total: "OrderedDict[str, np.ndarray]" = OrderedDict((k, np.zeros_like(v)) for k, v in params.items())
    for loss, grads in results:
        total_loss += loss
        for name, g in grads.items():
            total[name] += g
    for name in total:
        total[name] /= n
    return total_loss / n, total


def train(
    model_config: WattNetConfig,
    dataset: WindowedDataset,
    train_config: TrainConfig = TrainConfig(),
    fence_date: Optional[str] = None,
    epoch_log: Optional[EpochLogger] = None,
    init: Optional[ModelParams] = None
) -> Tuple[ModelParams, TrainReport]:
    """
    Fit the model to the dataset labels with cross-entropy.

    Args:
        model_config: architecture (input width resolved)
        dataset: training windows
        train_config: optimizer, schedule and early stopping
        fence_date: first test day; any sample on or after it is a leak
        epoch_log: JSONL sink for per-epoch records (cleared first)
        init: starting parameters (default: seeded init)

    Returns:
        Parameters with the best epoch loss and the run report
    """
    n = len(dataset)
    if n == 0:
        raise ValidationError("cannot train on an empty dataset")
    if fence_date is not None:
        fence = np.datetime64(fence_date, "D")
        latest = np.max(dataset.dates)
        if latest >= fence:
            raise ValidationError(f"training sample dated {latest} is on or after the test start {fence}")
    if dataset.labels.max() >= model_config.n_classes:
        raise ValidationError(f"label {dataset.labels.max()} outside {model_config.n_classes} classes")

    tc = train_config
    params = init.copy() if init is not None else init_params(model_config, tc.seed)
    state = AdamState.zeros_like(params.tensors)
    rng = np.random.default_rng(tc.seed)
    batches_per_epoch = math.ceil(n / tc.batch_size)
    total_steps = tc.max_epochs * batches_per_epoch

    report = TrainReport(n_samples=n, seed=tc.seed, total_steps=total_steps)
    best = params.copy()
    anchor_loss = float("inf")
    stale = 0
    started = time.perf_counter()
    if epoch_log is not None:
        epoch_log.clear()

    pool = ThreadPoolExecutor(max_workers=tc.workers) if tc.workers > 1 else None
    try:
        for epoch in range(tc.max_epochs):
            order = rng.permutation(n)
            loss_sum = 0.0
            diverged = False
            for b in range(batches_per_epoch):
                idx = order[b * tc.batch_size:(b + 1) * tc.batch_size]
                loss, grads = _batch_grads(params, dataset.windows[idx], dataset.labels[idx], tc.workers, pool)
                if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                    diverged = True
                    break
                lr = cosine_lr(report.steps, total_steps, tc.lr_start, tc.lr_end)
                tensors, state = adam_step(params.tensors, grads, state, lr, tc.beta1, tc.beta2, tc.eps)
                params = ModelParams(params.config, tensors)
                report.steps += 1
                loss_sum += loss * len(idx)

            report.stop_epoch = epoch
            if diverged:
                report.stop_reason = STOP_DIVERGED
                logger.error(f"Epoch {epoch}: loss diverged; keeping epoch {report.best_epoch} parameters")
                break

            epoch_loss = loss_sum / n
            report.epoch_losses.append(epoch_loss)
            # the checkpoint follows every new minimum; patience only resets
            # when the loss beats the last reset point by min_delta
            if epoch_loss < report.best_loss:
                report.best_loss = epoch_loss
                report.best_epoch = epoch
                best = params.copy()
            if epoch_loss < anchor_loss - tc.early_stop_min_delta:
                anchor_loss = epoch_loss
                stale = 0
            else:
                stale += 1

            lr_now = cosine_lr(report.steps, total_steps, tc.lr_start, tc.lr_end)
            logger.info(f"epoch {epoch:4d} loss {epoch_loss:.6f} best {report.best_loss:.6f} lr {lr_now:.3e}")
            if epoch_log is not None:
                epoch_log.log_event({
                    "epoch": epoch,
                    "loss": epoch_loss,
                    "best_loss": report.best_loss,
                    "lr": lr_now,
                    "steps": report.steps,
                })
            if stale >= tc.early_stop_patience:
                report.stop_reason = STOP_EARLY
                logger.info(f"Early stop at epoch {epoch}: no improvement over {tc.early_stop_patience} epochs")
                break
    finally:
        if pool is not None:
            pool.shutdown()

    if report.best_epoch < 0:
        raise ComputeError("training diverged before completing one epoch")
    report.wall_clock_seconds = time.perf_counter() - started
    report.train_accuracy = train_accuracy(best, dataset)
    report.model = describe(model_config)
    logger.info(
        f"Training finished ({report.stop_reason}) after {report.stop_epoch + 1} epochs: "
        f"best loss {report.best_loss:.6f} at epoch {report.best_epoch}, "
        f"train accuracy {report.train_accuracy:.2f}%"
    )
    return best, report


def train_accuracy(params: ModelParams, dataset: WindowedDataset, batch_size: int = 256) -> float:
    """Percent of windows whose predicted class equals the label."""
    if len(dataset) == 0:
        raise ValidationError("accuracy of an empty dataset")
    predictions = np.concatenate([
        predict_batch(params, dataset.windows[lo:lo + batch_size])
        for lo in range(0, len(dataset), batch_size)
    ])
    return 100.0 * float(np.mean(predictions == dataset.labels))


def evaluate_policy(params: ModelParams, dataset: WindowedDataset, batch_size: int = 256) -> Callable[[Any], int]:
    """
    Model policy for the backtester: day -> predicted class.

    Predictions are computed once for every window in ``dataset``.
    """
    predictions = {}
    for lo in range(0, len(dataset), batch_size):
        preds = predict_batch(params, dataset.windows[lo:lo + batch_size])
        predictions.update(zip(dataset.dates[lo:lo + batch_size], preds.tolist()))

    def policy(day) -> int:
        key = np.datetime64(day, "D")
        if key not in predictions:
            raise ValidationError(f"no model window for {key}")
        return int(predictions[key])

    return policy
