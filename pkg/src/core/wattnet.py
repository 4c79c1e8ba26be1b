"""
WATTNet Tenor Model
Per-time-step compression, stacked WATTBlocks (gated grouped dilated
convolution followed by residual slice attention) and a two-layer
classification head over the flattened final latent.
"""
import logging
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from config.config import WattNetConfig
from src.core import autodiff as ad
from src.core.autodiff import ConvSpec, DiffTensor
from src.core.errors import ConfigError, ShapeError

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class ModelParams:
    """Named parameter arrays plus the config that shaped them."""
    config: WattNetConfig
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    @property
    def names(self) -> List[str]:
        return list(self.tensors)

    def items(self):
        return self.tensors.items()

    def count(self) -> int:
        return int(sum(v.size for v in self.tensors.values()))

    def all_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, OrderedDict((k, v.copy()) for k, v in self.tensors.items()))

    def replace(self, tensors: Dict[str, np.ndarray]) -> "ModelParams":
        """Copy with the given tensors swapped in (shapes must match)."""
        updated = self.copy()
        for name, value in tensors.items():
            if updated.tensors[name].shape != np.shape(value):
                raise ShapeError(f"{name}: shape {np.shape(value)} != {updated.tensors[name].shape}")
            updated.tensors[name] = np.array(value, dtype=np.float64)
        return updated


@dataclass(frozen=True)
class LayerDim:
    """One row of the layer-dimension audit."""
    layer: str
    m_in: int
    m_out: int
    t_in: int
    t_out: int


@dataclass(eq=False)
class WattNetGraph:
    """One eager forward pass with its leaves kept for backward."""
    leaves: Dict[str, DiffTensor]
    inputs: DiffTensor
    latent: DiffTensor
    logits: DiffTensor


def param_shapes(config: WattNetConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Parameter names and shapes in initialization order."""
    m_in, m, k, d_k = config.input_width, config.compressed_width, config.kernel_size, config.d_k
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
    shapes["cmp.w"] = (m_in, m)
    shapes["cmp.b"] = (m,)
    for i in range(config.n_blocks):
        shapes[f"block{i}.conv_alpha"] = (m, k)
        shapes[f"block{i}.conv_beta"] = (m, k)
        shapes[f"block{i}.lift_u"] = (d_k,)
        shapes[f"block{i}.lift_b"] = (d_k,)
        shapes[f"block{i}.w_q"] = (d_k, d_k)
        shapes[f"block{i}.w_k"] = (d_k, d_k)
        shapes[f"block{i}.w_v"] = (d_k, 1)
    flat = config.t_final * m
    shapes["head.w1"] = (flat, config.head_hidden)
    shapes["head.b1"] = (config.head_hidden,)
    shapes["head.w2"] = (config.head_hidden, config.n_classes)
    shapes["head.b2"] = (config.n_classes,)
    return shapes


def _fan_in(name: str, config: WattNetConfig) -> int:
    suffix = name.split(".", 1)[1]
    if name.startswith("cmp."):
        return config.input_width
    if suffix in ("conv_alpha", "conv_beta"):
        return config.kernel_size
    if suffix in ("lift_u", "lift_b"):
        return 1
    if suffix in ("w_q", "w_k", "w_v"):
        return config.d_k
    if suffix in ("w1", "b1"):
        return config.t_final * config.compressed_width
    return config.head_hidden


def param_count(config: WattNetConfig) -> int:
    """
    M_in*M + M
    + n_blocks * (2*M*k + 2*d_k + 2*d_k^2 + d_k)
    + T_final*M*H + H + H*C + C
    """
    m_in, m, k, d_k = config.input_width, config.compressed_width, config.kernel_size, config.d_k
    h, c = config.head_hidden, config.n_classes
    per_block = 2 * m * k + 2 * d_k + 2 * d_k * d_k + d_k
    return m_in * m + m + config.n_blocks * per_block + config.t_final * m * h + h + h * c + c


def layer_dims(config: WattNetConfig) -> List[LayerDim]:
    """Input/output widths and lengths of every layer."""
    config.validate()
    lengths = config.t_progression()
    m = config.compressed_width
    rows = [LayerDim("FC-cmp", config.input_width, m, lengths[0], lengths[0])]
    for i in range(config.n_blocks):
        rows.append(LayerDim(f"WATTBlock-{i + 1}", m, m, lengths[i], lengths[i + 1]))
    rows.append(LayerDim("FC-1", lengths[-1] * m, config.head_hidden, 1, 1))
    rows.append(LayerDim("FC-2", config.head_hidden, config.n_classes, 1, 1))
    return rows


def init_params(config: WattNetConfig, seed: int = 0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) per tensor, seeded."""
    config.validate()
    rng = np.random.default_rng(seed)
    tensors: "OrderedDict[str, np.ndarray]" = OrderedDict()
    for name, shape in param_shapes(config).items():
        bound = 1.0 / np.sqrt(_fan_in(name, config))
        tensors[name] = rng.uniform(-bound, bound, size=shape)
    params = ModelParams(config, tensors)
    expected = param_count(config)
    if params.count() != expected:
        raise ConfigError(f"parameter audit failed: built {params.count()}, closed form {expected}")
    logger.info(f"Initialized WATTNet with {expected} parameters (T {config.t_progression()})")
    return params


def _check_batch(config: WattNetConfig, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    if batch.ndim == 2:
        batch = batch[None]
    if batch.ndim != 3:
        raise ShapeError(f"batch must be N x T x M_in, got shape {batch.shape}")
    if batch.shape[1] != config.window_len:
        raise ShapeError(f"window length {batch.shape[1]} != configured {config.window_len}")
    if batch.shape[2] != config.input_width:
        raise ShapeError(f"input width {batch.shape[2]} != configured {config.input_width}")
    return batch


def assemble(
    config: WattNetConfig,
    leaves: Mapping[str, DiffTensor],
    inputs: DiffTensor
) -> Tuple[DiffTensor, DiffTensor]:
    """
    Wire the model over caller-owned leaves.

    Returns:
        (final latent N x T_final x M, logits N x n_classes)
    """
    z = ad.dense(inputs, leaves["cmp.w"], leaves["cmp.b"])
    m = config.compressed_width
    for i, dilation in enumerate(config.dilation_schedule):
        spec = ConvSpec(config.kernel_size, dilation, m)
        p = f"block{i}."
        gated = ad.gated_activation(
            ad.grouped_dilated_conv(z, leaves[p + "conv_alpha"], spec),
            ad.grouped_dilated_conv(z, leaves[p + "conv_beta"], spec),
        )
        z = ad.residual_attention_block(
            gated, leaves[p + "lift_u"], leaves[p + "lift_b"],
            leaves[p + "w_q"], leaves[p + "w_k"], leaves[p + "w_v"],
        )
    n = inputs.shape[0]
    flat = ad.reshape(z, (n, config.t_final * m))
    hidden = ad.relu(ad.dense(flat, leaves["head.w1"], leaves["head.b1"]))
    return z, ad.dense(hidden, leaves["head.w2"], leaves["head.b2"])


def build_graph(
    params: ModelParams,
    batch: np.ndarray,
    trainable: bool = True,
    input_grad: bool = False
) -> WattNetGraph:
    """
    Run the model eagerly, recording the graph.

    Args:
        params: model parameters (never modified)
        batch: N x T x M_in windows
        trainable: make parameters gradient leaves
        input_grad: make the input batch a gradient leaf
    """
    config = params.config
    batch = _check_batch(config, batch)
    make = DiffTensor.leaf if trainable else DiffTensor.constant
    leaves = {name: make(value) for name, value in params.items()}
    inputs = DiffTensor.leaf(batch) if input_grad else DiffTensor.constant(batch)
    latent_out, logits = assemble(config, leaves, inputs)
    return WattNetGraph(leaves, inputs, latent_out, logits)


def forward(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    """Un-normalized logits N x n_classes."""
    return build_graph(params, batch, trainable=False).logits.value


def latent(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    """Final WATTBlock output N x T_final x M."""
    return build_graph(params, batch, trainable=False).latent.value


def predict_batch(params: ModelParams, batch: np.ndarray) -> np.ndarray:
    """Argmax class per window; ties go to the smaller class."""
    return np.argmax(forward(params, batch), axis=1)


def predict_tenor(params: ModelParams, window: np.ndarray) -> int:
    window = np.asarray(window, dtype=np.float64)
    if window.ndim == 3 and window.shape[0] != 1:
        raise ShapeError(f"predict_tenor takes a single window, got batch of {window.shape[0]}")
    return int(predict_batch(params, window)[0])


def loss_and_grads(
    params: ModelParams,
    batch: np.ndarray,
    labels: Sequence[int],
    reduction: str = "mean"
) -> Tuple[float, "OrderedDict[str, np.ndarray]"]:
    """Cross-entropy against ``labels`` and its gradient per parameter."""
    graph = build_graph(params, batch)
    loss = ad.softmax_cross_entropy(graph.logits, labels, reduction)
    loss.backward()
    grads = OrderedDict(
        (name, leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
        for name, leaf in graph.leaves.items()
    )
    return float(loss.value), grads


def logits_with_input_grad(
    params: ModelParams,
    batch: np.ndarray,
    targets: Optional[Sequence[int]] = None,
    loss_scale: float = 1.0
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Logits and d(loss_scale * sum CE)/d(input) for a batch.

    ``targets`` of None uses each window's own predicted class.

    Returns:
        (logits N x C, input gradient N x T x M_in)
    """
    graph = build_graph(params, batch, trainable=False, input_grad=True)
    if targets is None:
        targets = np.argmax(graph.logits.value, axis=1)
    loss = ad.scale(ad.softmax_cross_entropy(graph.logits, targets, reduction="sum"), loss_scale)
    loss.backward()
    grad = graph.inputs.grad if graph.inputs.grad is not None else np.zeros_like(graph.inputs.value)
    return graph.logits.value, grad


def describe(config: WattNetConfig) -> Dict[str, object]:
    """Shape summary stored in the checkpoint manifest."""
    return {
        "t_progression": config.t_progression(),
        "param_count": param_count(config),
        "input_width": config.input_width,
        "layers": [asdict(row) for row in layer_dims(config)],
    }
