"""End-to-end multimodal classifier assembled from the building blocks.

    maps --backbone--> 512-d features --tokenizer--> (L, d_m) tokens
         --interaction--> enhanced tokens --heads--> per-modality confidences
         --decision--> joint confidences

Interaction: "arpm" (three modalities, primaries selectable), "dafn2"
(two modalities), or "none".  Decision: "er" (ER rule over the heads),
"concat" (one linear head on concatenated features), or "single" (one
modality, its own head).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .arpm import ARPM, BimodalInteraction, Tokenizer
from .backbone import Backbone, BackboneConfig, FEATURE_WIDTH
from .data import MAP_CHANNELS, MODALITY_NAMES
from .fusion import DecisionHead, N_CLASSES, er_joint, stack_heads
from .nn import Linear, Module
from .tensor import ConfigurationError, Tensor, concat, layer_norm, mean, softmax

INTERACTIONS = ("arpm", "dafn2", "none")
DECISIONS = ("er", "concat", "single")


@dataclass
class ModelConfig:
    modalities: tuple[int, ...] = (0, 1, 2)
    interaction: str = "arpm"
    primaries: tuple[int, ...] = (0, 1, 2)
    decision: str = "er"
    alpha: str = "wr"
    d_m: int = 256
    heads: int = 4
    n_tokens: int = 4
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            self.backbone = BackboneConfig(**self.backbone)
        self.modalities = tuple(sorted(int(m) for m in self.modalities))
        self.primaries = tuple(sorted(int(m) for m in self.primaries))
        k = len(self.modalities)
        if k == 0 or len(set(self.modalities)) != k or not set(self.modalities) <= {0, 1, 2}:
            raise ConfigurationError(f"modalities must be a non-empty subset of (0, 1, 2), got {self.modalities}")
        if self.interaction not in INTERACTIONS:
            raise ConfigurationError(f"interaction must be one of {INTERACTIONS}, got {self.interaction!r}")
        if self.decision not in DECISIONS:
            raise ConfigurationError(f"decision must be one of {DECISIONS}, got {self.decision!r}")
        if self.interaction == "arpm" and (k != 3 or not self.primaries or not set(self.primaries) <= {0, 1, 2}):
            raise ConfigurationError("arpm needs all three modalities and at least one primary")
        if self.interaction == "dafn2" and k != 2:
            raise ConfigurationError("dafn2 interaction needs exactly two modalities")
        if (self.decision == "single") != (k == 1):
            raise ConfigurationError("decision 'single' is for exactly one modality")

    def as_dict(self) -> dict:
        d = asdict(self)
        d["backbone"]["dilated_branches"] = [list(b) for b in d["backbone"]["dilated_branches"]]
        return d


@dataclass
class ModelOutput:
    probs: dict[int, Tensor]
    joint: Tensor
    w: Tensor | None = None
    r: Tensor | None = None

    def stacked(self) -> np.ndarray:
        """(B, M, N) head confidences in modality order."""
        return np.stack([self.probs[m].data for m in sorted(self.probs)], axis=-2)


class MAINet(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.backbones = {str(m): Backbone(MAP_CHANNELS[m], cfg.backbone, rng) for m in cfg.modalities}
        raw_concat = cfg.decision == "concat" and cfg.interaction == "none"
        if not raw_concat:
            self.tokenizers = {str(m): Tokenizer(cfg.d_m, rng, cfg.n_tokens, FEATURE_WIDTH) for m in cfg.modalities}
        if cfg.interaction == "arpm":
            self.interaction = ARPM(cfg.d_m, cfg.heads, rng, cfg.primaries)
        elif cfg.interaction == "dafn2":
            self.interaction = BimodalInteraction(cfg.d_m, cfg.heads, rng)
        if cfg.decision == "concat":
            width = FEATURE_WIDTH if raw_concat else cfg.d_m
            self.concat_head = Linear(width * len(cfg.modalities), N_CLASSES, rng, gain=0.1)
        else:
            self.heads = {str(m): DecisionHead(cfg.d_m, rng) for m in cfg.modalities}

    def features(self, maps) -> dict[int, Tensor]:
        # the miniature backbone has no normalisation layers; standardise its output
        return {m: layer_norm(self.backbones[str(m)](maps[m])) for m in self.cfg.modalities}

    def forward(self, maps) -> ModelOutput:
        """maps: sequence indexed by modality id, each (B, C, S, S)."""
        cfg = self.cfg
        feats = self.features(maps)
        if cfg.decision == "concat" and cfg.interaction == "none":
            joint = softmax(self.concat_head(concat([feats[m] for m in cfg.modalities], axis=-1)), axis=-1)
            return ModelOutput({}, joint)
        tokens = {m: self.tokenizers[str(m)](feats[m]) for m in cfg.modalities}
        if cfg.interaction == "arpm":
            out = self.interaction(tokens[0], tokens[1], tokens[2])
            tokens = dict(enumerate(out))
        elif cfg.interaction == "dafn2":
            x, y = cfg.modalities
            tokens[x], tokens[y] = self.interaction(tokens[x], tokens[y])
        if cfg.decision == "concat":
            pooled = [mean(tokens[m], axis=-2) for m in cfg.modalities]
            return ModelOutput({}, softmax(self.concat_head(concat(pooled, axis=-1)), axis=-1))
        probs = {m: self.heads[str(m)](tokens[m]) for m in cfg.modalities}
        if cfg.decision == "single":
            return ModelOutput(probs, probs[cfg.modalities[0]])
        heads = [self.heads[str(m)] for m in cfg.modalities]
        p, w, r = stack_heads([probs[m] for m in cfg.modalities], heads)
        return ModelOutput(probs, er_joint(p, w, r, cfg.alpha), w, r)


def describe(cfg: ModelConfig) -> str:
    names = "+".join(MODALITY_NAMES[m] for m in cfg.modalities)
    if cfg.interaction == "arpm":
        prim = "all" if cfg.primaries == (0, 1, 2) else "+".join(MODALITY_NAMES[m] for m in cfg.primaries)
        names += f" arpm[{prim}]"
    elif cfg.interaction == "dafn2":
        names += " dafn2"
    return f"{names} {cfg.decision}"
