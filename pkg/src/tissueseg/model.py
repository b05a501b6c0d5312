"""Full segmentation network: backbone, initial head, relation module, final head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import Backbone, EncoderFeatures
from .config import ModelConfig
from .params import ModelParams, init_params
from .tensor import Tensor
from .trm import TissueGraph, TissueRelationModule


@dataclass
class ModelOutput:
    final_logits: Tensor  # B x K x H x W
    init_logits: Tensor  # B x K x H0 x W0
    probs: Tensor  # B x K x H2 x W2
    d2: Tensor
    d2_fused: Tensor
    graphs: list[TissueGraph]
    features: EncoderFeatures


class SegmentationModel:
    """Encoder-decoder with a tissue graph refinement between decoder stages 2 and 3."""

    def __init__(self, config: ModelConfig, seed: int | None = 0):
        self.config = config.validate()
        self.params = ModelParams(dtype=config.np_dtype)
        self.backbone = Backbone(config, self.params)
        self.trm = TissueRelationModule(config, self.params, self.backbone.dec_channels[1])
        self.training = True
        if seed is not None:
            init_params(self.params, seed)

    def train(self) -> "SegmentationModel":
        self.training = True
        return self

    def eval(self) -> "SegmentationModel":
        self.training = False
        return self

    def forward(self, x) -> ModelOutput:
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.config.np_dtype))
        elif x.dtype != self.config.np_dtype:
            x = Tensor(x.data.astype(self.config.np_dtype))
        if x.ndim == 3:
            x = Tensor(x.data[None])
        bb, tr = self.backbone, self.training
        enc = bb.encode(x, tr)
        d1 = bb.decode_stage(1, enc.E5, enc.E4, tr)
        d2 = bb.decode_stage(2, d1, enc.E3, tr)
        init_logits = bb.initial_head(enc.E5)
        probs = bb.initial_probs(init_logits, d2.shape[2], d2.shape[3])
        d2_fused, graphs = self.trm.forward(probs, d2, tr)
        d3 = bb.decode_stage(3, d2_fused, enc.E2, tr)
        d4 = bb.decode_stage(4, d3, enc.E1, tr)
        d5 = bb.decode_stage(5, d4, None, tr)
        final_logits = bb.final_head(d5)
        return ModelOutput(final_logits, init_logits, probs, d2, d2_fused, graphs, enc)

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        """Per-pixel argmax of the final logits (ties go to the lowest class index)."""
        from .tensor import no_grad

        with no_grad():
            out = self.forward(x)
        return out.final_logits.data.argmax(axis=1)
