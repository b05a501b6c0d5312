"""Scaled ResNet-style encoder, five-stage decoder and segmentation heads."""

from __future__ import annotations

from dataclasses import dataclass

from . import functional as F
from .config import ModelConfig
from .params import CONV, ONES, ZEROS, ModelParams
from .tensor import Tensor, add, concat, relu, softmax


@dataclass
class EncoderFeatures:
    E1: Tensor
    E2: Tensor
    E3: Tensor
    E4: Tensor
    E5: Tensor

    def as_list(self) -> list[Tensor]:
        return [self.E1, self.E2, self.E3, self.E4, self.E5]


def declare_conv(params: ModelParams, prefix: str, c_in: int, c_out: int, k: int, bias: bool = False) -> None:
    params.declare(f"{prefix}.weight", (c_out, c_in, k, k), CONV, fan_in=c_in * k * k)
    if bias:
        params.declare(f"{prefix}.bias", (c_out,), ZEROS)


def declare_bn(params: ModelParams, prefix: str, channels: int) -> None:
    params.declare(f"{prefix}.weight", (channels,), ONES)
    params.declare(f"{prefix}.bias", (channels,), ZEROS)
    params.declare_buffer(f"{prefix}.running_mean", [0.0] * channels)
    params.declare_buffer(f"{prefix}.running_var", [1.0] * channels)


def conv(params: ModelParams, prefix: str, x: Tensor, stride: int = 1, pad: int | None = None) -> Tensor:
    w = params[f"{prefix}.weight"]
    b = params.tensors.get(f"{prefix}.bias")
    k = w.shape[-1]
    return F.conv2d(x, w, b, stride=stride, pad=k // 2 if pad is None else pad)


def bn(params: ModelParams, prefix: str, x: Tensor, training: bool) -> Tensor:
    return F.batch_norm2d(
        x,
        params[f"{prefix}.weight"],
        params[f"{prefix}.bias"],
        params.buffers[f"{prefix}.running_mean"],
        params.buffers[f"{prefix}.running_var"],
        training,
    )


def conv_bn_relu(params: ModelParams, prefix: str, x: Tensor, training: bool, stride: int = 1) -> Tensor:
    return relu(bn(params, f"{prefix}.bn", conv(params, f"{prefix}.conv", x, stride), training))


class Backbone:
    """Encoder with channel ladder [w, w, 2w, 4w, 8w] at strides [2, 4, 8, 16, 32].

    Decoder stages 1..5 upsample by two, concatenate the skip feature when one
    exists and apply two conv+BN+ReLU units.  D1 has 4w channels, D2 2w, and
    D3..D5 w.
    """

    STEM_KERNEL = 7

    def __init__(self, config: ModelConfig, params: ModelParams):
        self.config = config
        self.params = params
        w, K = config.base_width, config.num_classes
        self.enc_channels = [w, w, 2 * w, 4 * w, 8 * w]
        self.dec_channels = [4 * w, 2 * w, w, w, w]
        p = params
        declare_conv(p, "encoder.stem.conv", 3, w, self.STEM_KERNEL)
        declare_bn(p, "encoder.stem.bn", w)
        c_in = w
        for stage, c_out in zip(range(1, 5), self.enc_channels[1:]):
            for blk in range(config.blocks_per_stage):
                prefix = f"encoder.layer{stage}.block{blk}"
                stride = 2 if (blk == 0 and stage > 1) else 1
                declare_conv(p, f"{prefix}.conv1", c_in, c_out, 3)
                declare_bn(p, f"{prefix}.bn1", c_out)
                declare_conv(p, f"{prefix}.conv2", c_out, c_out, 3)
                declare_bn(p, f"{prefix}.bn2", c_out)
                if stride != 1 or c_in != c_out:
                    declare_conv(p, f"{prefix}.down.conv", c_in, c_out, 1)
                    declare_bn(p, f"{prefix}.down.bn", c_out)
                c_in = c_out
        skips = [self.enc_channels[3], self.enc_channels[2], self.enc_channels[1], self.enc_channels[0], 0]
        prev = self.enc_channels[4]
        for i, (c_out, c_skip) in enumerate(zip(self.dec_channels, skips), start=1):
            declare_conv(p, f"decoder.stage{i}.unit1.conv", prev + c_skip, c_out, 3)
            declare_bn(p, f"decoder.stage{i}.unit1.bn", c_out)
            declare_conv(p, f"decoder.stage{i}.unit2.conv", c_out, c_out, 3)
            declare_bn(p, f"decoder.stage{i}.unit2.bn", c_out)
            prev = c_out
        declare_conv(p, "head.initial", 8 * w, K, 1, bias=True)
        declare_conv(p, "head.final", w, K, 1, bias=True)

    def _block(self, prefix: str, x: Tensor, stride: int, training: bool) -> Tensor:
        p = self.params
        out = relu(bn(p, f"{prefix}.bn1", conv(p, f"{prefix}.conv1", x, stride), training))
        out = bn(p, f"{prefix}.bn2", conv(p, f"{prefix}.conv2", out), training)
        if f"{prefix}.down.conv.weight" in p:
            x = bn(p, f"{prefix}.down.bn", conv(p, f"{prefix}.down.conv", x, stride, pad=0), training)
        return relu(add(out, x))

    def encode(self, x: Tensor, training: bool) -> EncoderFeatures:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"encode expects a B x 3 x H x W input, got {x.shape}")
        H, W = x.shape[2:]
        if H % 32 or W % 32:
            raise ValueError(f"input spatial size {H}x{W} must be divisible by 32")
        p = self.params
        e1 = relu(bn(p, "encoder.stem.bn", conv(p, "encoder.stem.conv", x, stride=2), training))
        feats = [e1]
        h = F.maxpool2d(e1, 3, 2, 1)
        for stage in range(1, 5):
            for blk in range(self.config.blocks_per_stage):
                stride = 2 if (blk == 0 and stage > 1) else 1
                h = self._block(f"encoder.layer{stage}.block{blk}", h, stride, training)
            feats.append(h)
        return EncoderFeatures(*feats)

    def decode_stage(self, i: int, prev: Tensor, skip: Tensor | None, training: bool) -> Tensor:
        H, W = prev.shape[2:]
        up = F.bilinear_upsample(prev, 2 * H, 2 * W)
        if skip is not None:
            if skip.shape[2:] != up.shape[2:]:
                raise ValueError(f"decoder stage {i}: skip {skip.shape} does not match upsampled {up.shape}")
            up = concat([up, skip], axis=1)
        h = conv_bn_relu(self.params, f"decoder.stage{i}.unit1", up, training)
        return conv_bn_relu(self.params, f"decoder.stage{i}.unit2", h, training)

    def initial_head(self, e5: Tensor) -> Tensor:
        return conv(self.params, "head.initial", e5)

    def initial_probs(self, logits: Tensor, out_h: int, out_w: int) -> Tensor:
        return softmax(F.bilinear_upsample(logits, out_h, out_w), axis=1)

    def final_head(self, d5: Tensor) -> Tensor:
        return conv(self.params, "head.final", d5)
