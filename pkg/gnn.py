"""Message-passing operators used for the matching network and the consensus network."""

import logging
from dataclasses import asdict, dataclass, fields
from typing import Any, Callable, Dict, List, Optional, Union

import numpy as np

from autodiff import (
    Tensor,
    add,
    batch_stat_normalize,
    concat_columns,
    dropout,
    matmul,
    relu,
    scale,
    sparse_dense_matmul,
)
from config import Config
from exceptions import ShapeMismatchError
from graphs import Graph

logger = logging.getLogger(__name__)

ArrayLike = Union[Tensor, np.ndarray]


def _as_tensor(x: ArrayLike) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_rows(h: Tensor, g: Graph, op: str) -> None:
    if h.values.ndim != 2 or h.shape[0] != g.num_nodes:
        raise ShapeMismatchError(f"{op}: features {h.shape} for a graph with {g.num_nodes} nodes")


class Layer:
    """Base class holding named parameters, buffers and child layers."""

    def __init__(self):
        self.training = True
        self._params: Dict[str, Tensor] = {}
        self._buffers: Dict[str, np.ndarray] = {}
        self._children: Dict[str, "Layer"] = {}

    def add_parameter(self, name: str, values: np.ndarray) -> Tensor:
        tensor = Tensor(np.array(values, dtype=np.float64), requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def add_buffer(self, name: str, values: np.ndarray) -> np.ndarray:
        array = np.array(values, dtype=np.float64)
        self._buffers[name] = array
        return array

    def add_child(self, name: str, layer: "Layer") -> "Layer":
        self._children[name] = layer
        return layer

    def named_parameters(self, prefix: str = "") -> Dict[str, Tensor]:
        named = {f"{prefix}{name}": tensor for name, tensor in self._params.items()}
        for child_name, child in self._children.items():
            named.update(child.named_parameters(f"{prefix}{child_name}."))
        return named

    def named_buffers(self, prefix: str = "") -> Dict[str, np.ndarray]:
        named = {f"{prefix}{name}": array for name, array in self._buffers.items()}
        for child_name, child in self._children.items():
            named.update(child.named_buffers(f"{prefix}{child_name}."))
        return named

    def num_parameters(self) -> int:
        return int(sum(t.values.size for t in self.named_parameters().values()))

    def train(self, mode: bool = True) -> "Layer":
        self.training = mode
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Layer":
        return self.train(False)


class Linear(Layer):
    """Affine map x W + b with Glorot-uniform initialised weights."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        limit = np.sqrt(6.0 / (in_dim + out_dim))
        self.weight = self.add_parameter("weight", rng.uniform(-limit, limit, size=(in_dim, out_dim)))
        self.bias = self.add_parameter("bias", np.zeros(out_dim)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        out = matmul(x, self.weight)
        return add(out, self.bias) if self.bias is not None else out


class BatchNorm(Layer):
    def __init__(self, dim: int, momentum: float = Config.BATCH_NORM_MOMENTUM, eps: float = Config.BATCH_NORM_EPS):
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = self.add_parameter("gamma", np.ones(dim))
        self.beta = self.add_parameter("beta", np.zeros(dim))
        self.running_mean = self.add_buffer("running_mean", np.zeros(dim))
        self.running_var = self.add_buffer("running_var", np.ones(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return batch_stat_normalize(x, self.gamma, self.beta, self.running_mean, self.running_var,
                                    self.training, self.momentum, self.eps)


class Mlp(Layer):
    """
    Multi-layer perceptron with rectifier activations.

    Every layer is followed by ReLU and (optionally) batch normalization;
    with plain_last the final layer is a bare affine map, which is how the
    scalar update network is built.
    """

    def __init__(self, dims: List[int], rng: np.random.Generator, batch_norm: bool = True,
                 dropout: float = 0.0, plain_last: bool = False):
        super().__init__()
        if len(dims) < 2:
            raise ValueError(f"An MLP needs at least input and output widths, got {dims}")
        self.dims = list(dims)
        self.dropout = dropout
        self.plain_last = plain_last
        self.linears: List[Linear] = []
        self.norms: List[Optional[BatchNorm]] = []
        for k in range(len(dims) - 1):
            self.linears.append(self.add_child(f"lin{k}", Linear(dims[k], dims[k + 1], rng)))
            last = k == len(dims) - 2
            norm = None
            if batch_norm and not (plain_last and last):
                norm = self.add_child(f"norm{k}", BatchNorm(dims[k + 1]))
            self.norms.append(norm)

    @property
    def depth(self) -> int:
        return len(self.linears)

    def __call__(self, x: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        h = x
        for k, (linear, norm) in enumerate(zip(self.linears, self.norms)):
            h = linear(h)
            if self.plain_last and k == self.depth - 1:
                break
            h = relu(h)
            if norm is not None:
                h = norm(h)
            if k < self.depth - 1:
                h = _apply_dropout(h, self.dropout, self.training, rng)
        return h


def _apply_dropout(h: Tensor, p: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    if not training or p <= 0.0:
        return h
    if rng is None:
        raise ValueError("A random generator is required for dropout in training mode")
    return dropout(h, rng.random(h.shape) >= p, p)


class GinLayer(Layer):
    """Sum-aggregation layer: MLP((1 + eps) * h_i + sum of in-neighbour features)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, hidden_dim: int = Config.HIDDEN_DIM,
                 mlp_depth: int = Config.MLP_DEPTH, batch_norm: bool = True):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.epsilon = self.add_parameter("epsilon", np.zeros(1))
        dims = [in_dim] + [hidden_dim] * (mlp_depth - 1) + [out_dim]
        self.mlp = self.add_child("mlp", Mlp(dims, rng, batch_norm=batch_norm))

    def __call__(self, h: Tensor, g: Graph, rng: Optional[np.random.Generator] = None) -> Tensor:
        return gin_forward(self, h, g)


class RelationalLayer(Layer):
    """Direction-aware layer: ReLU(W1 h_i + sum_{j->i} W2 h_j + sum_{i->j} W3 h_j)."""

    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.self_weight = self.add_child("self", Linear(in_dim, out_dim, rng, bias=False))
        self.in_weight = self.add_child("in", Linear(in_dim, out_dim, rng, bias=False))
        self.out_weight = self.add_child("out", Linear(in_dim, out_dim, rng, bias=False))

    def __call__(self, h: Tensor, g: Graph, rng: Optional[np.random.Generator] = None) -> Tensor:
        return relational_forward(self, h, g)


class FixedAx(Layer):
    """Non-trainable one-layer operator A x."""

    def __init__(self, in_dim: int):
        super().__init__()
        self.in_dim = in_dim
        self.out_dim = in_dim

    def __call__(self, h: Tensor, g: Graph, rng: Optional[np.random.Generator] = None) -> Tensor:
        return fixed_ax_forward(h, g)


def gin_forward(layer: GinLayer, h: ArrayLike, g: Graph) -> Tensor:
    h = _as_tensor(h)
    _check_rows(h, g, "gin_forward")
    neighbours = sparse_dense_matmul(g.in_adjacency(), h)
    self_weight = add(Tensor(np.ones(1)), layer.epsilon)
    return layer.mlp(add(scale(h, self_weight), neighbours))


def relational_forward(layer: RelationalLayer, h: ArrayLike, g: Graph) -> Tensor:
    h = _as_tensor(h)
    _check_rows(h, g, "relational_forward")
    incoming = sparse_dense_matmul(g.in_adjacency(), h)
    outgoing = sparse_dense_matmul(g.adjacency(), h)
    total = add(add(layer.self_weight(h), layer.in_weight(incoming)), layer.out_weight(outgoing))
    return relu(total)


def fixed_ax_forward(x: ArrayLike, g: Graph) -> Tensor:
    x = _as_tensor(x)
    _check_rows(x, g, "fixed_ax_forward")
    return sparse_dense_matmul(g.adjacency(), x)


@dataclass
class GnnConfig:
    """Architecture of one message-passing network."""

    kind: str = "gin"
    num_layers: int = Config.NUM_LAYERS
    hidden_dim: int = Config.HIDDEN_DIM
    out_dim: Optional[int] = None
    jumping_knowledge: bool = True
    dropout: float = 0.0
    batch_norm: bool = True
    mlp_depth: int = Config.MLP_DEPTH

    def validate(self) -> None:
        if self.kind not in OPERATORS:
            raise ValueError(f"Unknown operator kind {self.kind!r}; available: {sorted(OPERATORS)}")
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        if self.kind == "fixed_ax" and (self.num_layers != 1 or self.jumping_knowledge):
            raise ValueError("fixed_ax is a single non-trainable layer without jumping knowledge")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "GnnConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise ValueError(f"Unknown GNN config keys: {sorted(unknown)}")
        return cls(**payload)


def _build_gin(in_dim: int, out_dim: int, cfg: GnnConfig, rng: np.random.Generator) -> Layer:
    return GinLayer(in_dim, out_dim, rng, cfg.hidden_dim, cfg.mlp_depth, cfg.batch_norm)


def _build_relational(in_dim: int, out_dim: int, cfg: GnnConfig, rng: np.random.Generator) -> Layer:
    return RelationalLayer(in_dim, out_dim, rng)


def _build_fixed_ax(in_dim: int, out_dim: int, cfg: GnnConfig, rng: np.random.Generator) -> Layer:
    return FixedAx(in_dim)


# Operator registry; new operator kinds register a builder here.
OPERATORS: Dict[str, Callable[[int, int, GnnConfig, np.random.Generator], Layer]] = {
    "gin": _build_gin,
    "relational": _build_relational,
    "fixed_ax": _build_fixed_ax,
}


class Gnn(Layer):
    """
    Stack of T message-passing layers with optional jumping-knowledge output.

    With jumping knowledge the node embedding is W [h^(1) || ... || h^(T)]
    (W without bias); otherwise it is the output of the last layer.
    """

    def __init__(self, config: GnnConfig, in_dim: int, rng: np.random.Generator):
        super().__init__()
        config.validate()
        self.config = config
        self.in_dim = in_dim
        builder = OPERATORS[config.kind]
        final_dim = config.out_dim or config.hidden_dim
        self.layers: List[Layer] = []
        width = in_dim
        for t in range(config.num_layers):
            last = t == config.num_layers - 1
            layer_out = config.hidden_dim if (config.jumping_knowledge or not last) else final_dim
            layer = self.add_child(f"layer{t}", builder(width, layer_out, config, rng))
            self.layers.append(layer)
            width = layer.out_dim
        self.projection: Optional[Linear] = None
        if config.jumping_knowledge:
            concat_dim = sum(layer.out_dim for layer in self.layers)
            self.projection = self.add_child("jk", Linear(concat_dim, final_dim, rng, bias=False))
        self.out_dim = final_dim if config.kind != "fixed_ax" else in_dim

    def __call__(self, x: ArrayLike, g: Graph, rng: Optional[np.random.Generator] = None) -> Tensor:
        return gnn_forward(self.config, self, x, g, rng)


def gnn_forward(config: GnnConfig, params: Gnn, x: ArrayLike, g: Graph,
                rng: Optional[np.random.Generator] = None) -> Tensor:
    """
    Node embeddings H = Psi(X, A) for one graph.

    Args:
        config: Architecture description
        params: Network holding the layer parameters
        x: Node feature matrix [num_nodes x in_dim]
        g: Graph to propagate over
        rng: Random generator for dropout masks (training mode only)

    Returns:
        Embedding matrix [num_nodes x out_dim]
    """
    h = _as_tensor(x)
    if h.values.ndim != 2 or h.shape[1] != params.in_dim:
        raise ShapeMismatchError(f"gnn_forward: features {h.shape}, network expects width {params.in_dim}")
    outputs = []
    for layer in params.layers:
        h = layer(h, g)
        h = _apply_dropout(h, config.dropout, params.training, rng)
        outputs.append(h)
    if params.projection is None:
        return h
    return params.projection(concat_columns(outputs))
