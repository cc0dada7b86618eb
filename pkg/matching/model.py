import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional

import numpy as np

from autodiff import Tensor
from config import Config
from gnn import Gnn, GnnConfig, Layer, Mlp
from graphs import Graph

logger = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    """
    Architecture of the full matching model.

    Attributes:
        in_dim: Width of the input node features
        matching: Network Psi_theta1 producing the node embeddings for feature matching
        consensus: Network Psi_theta2 distributing the node indicator functions
        indicator_dim: Width of the node indicator functions (|V_s| for identity
            indicators, r for random indicators)
    """

    in_dim: int = Config.MAX_DEGREE + 1
    matching: GnnConfig = field(default_factory=GnnConfig)
    consensus: GnnConfig = field(default_factory=GnnConfig)
    indicator_dim: int = Config.RANDOM_INDICATOR_DIM

    def validate(self) -> None:
        if self.in_dim < 1 or self.indicator_dim < 1:
            raise ValueError(f"Feature widths must be positive, got in_dim={self.in_dim}, "
                             f"indicator_dim={self.indicator_dim}")
        self.matching.validate()
        self.consensus.validate()
        if self.consensus.dropout != 0.0:
            raise ValueError("The consensus network runs without dropout")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "in_dim": self.in_dim,
            "matching": self.matching.to_dict(),
            "consensus": self.consensus.to_dict(),
            "indicator_dim": self.indicator_dim,
        }

    @classmethod
    def from_dict(cls, payload: Dict[str, Any]) -> "ModelConfig":
        unknown = set(payload) - {"in_dim", "matching", "consensus", "indicator_dim"}
        if unknown:
            raise ValueError(f"Unknown model config keys: {sorted(unknown)}")
        return cls(
            in_dim=int(payload.get("in_dim", Config.MAX_DEGREE + 1)),
            matching=GnnConfig.from_dict(payload.get("matching", {})),
            consensus=GnnConfig.from_dict(payload.get("consensus", {})),
            indicator_dim=int(payload.get("indicator_dim", Config.RANDOM_INDICATOR_DIM)),
        )


class ModelParams(Layer):
    """Parameters theta1 (matching GNN), theta2 (consensus GNN) and theta3 (update MLP)."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        config.validate()
        self.config = config
        self.psi1 = self.add_child("psi1", Gnn(config.matching, config.in_dim, rng))
        self.psi2 = self.add_child("psi2", Gnn(config.consensus, config.indicator_dim, rng))
        width = self.psi2.out_dim
        self.phi = self.add_child("phi", Mlp([width, width, 1], rng, batch_norm=False, plain_last=True))
        logger.info(f"Built model with {self.num_parameters()} parameters "
                    f"({config.matching.kind} matching, {config.consensus.kind} consensus)")

    def matching_parameters(self) -> Dict[str, Tensor]:
        return self.psi1.named_parameters("psi1.")

    def refinement_parameters(self) -> Dict[str, Tensor]:
        named = self.psi2.named_parameters("psi2.")
        named.update(self.phi.named_parameters("phi."))
        return named


def build_model(config: ModelConfig, seed: int = 0) -> ModelParams:
    return ModelParams(config, np.random.default_rng(seed))


def node_features(g: Graph) -> np.ndarray:
    """Input features of a graph; featureless graphs get a constant column."""
    if g.node_features is None:
        return np.ones((g.num_nodes, 1))
    return g.node_features
