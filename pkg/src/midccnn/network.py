"""Backbone plus head, wired into a single bag classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .dccnn import ConfigError, Dccnn, DccnnConfig, init_params
from .layers import Dropout, Module
from .mil import METHODS, BagPrediction, MilHead
from .tensor import Tensor


@dataclass
class HeadConfig:
    method: str = "attention"
    hidden_dim: int = 64
    attention_input: str = "logits"

    def problems(self) -> list[str]:
        out = []
        if self.method not in METHODS:
            out.append(f"method must be one of {list(METHODS)}, got {self.method!r}")
        if self.hidden_dim < 1:
            out.append(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        if self.attention_input not in ("logits", "probs"):
            out.append(f"attention_input must be 'logits' or 'probs', got {self.attention_input!r}")
        return out

    def to_dict(self) -> dict:
        return asdict(self)


class Network(Module):
    """DCCNN features fed to either the MIL head or the GAP+FC classifier."""

    def __init__(self, model_cfg: DccnnConfig, head_cfg: HeadConfig | None = None, dropout: float = 0.0):
        head_cfg = head_cfg or HeadConfig()
        problems = model_cfg.problems() + head_cfg.problems()
        if problems:
            raise ConfigError(problems)
        self.model_cfg, self.head_cfg = model_cfg, head_cfg
        self.backbone = Dccnn(model_cfg, dropout)
        self.head = None
        if model_cfg.head == "mil":
            self.head = MilHead(
                model_cfg.feature_channels,
                model_cfg.num_classes,
                head_cfg.hidden_dim,
                head_cfg.method,
                head_cfg.attention_input,
            )
        init_params(self, model_cfg.seed)

    @property
    def num_classes(self) -> int:
        return self.model_cfg.num_classes

    @property
    def method(self) -> str:
        return self.head.method if self.head is not None else "gap_fc"

    def set_dropout(self, rate: float) -> None:
        self.backbone.set_dropout(rate)

    def reseed_dropout(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for m in self.modules():
            if isinstance(m, Dropout):
                m.rng = rng

    def predict(self, x: Tensor) -> BagPrediction:
        features = self.backbone.forward_features(x)
        if self.head is None:
            probs = self.backbone.forward_gap_head(features)
            return BagPrediction(probs, probs, None)
        return self.head(self.backbone.head_drop(features))

    def __call__(self, x: Tensor) -> Tensor:
        return self.predict(x).p_bag
