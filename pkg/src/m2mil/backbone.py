"""Patch encoder and lobe-segmentation decoder (U-Net layout, four levels)."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .tensor import (ParamStore, RunningStats, Tensor, batchnorm2d, concat_channels, conv2d,
                     maxpool2, relu, transpose, upsample2)


@dataclass(frozen=True)
class ArchConfig:
    """Channel widths and concept counts.

    The defaults are the full-size network; :data:`DESK_ARCH` is the reduced
    variant used for CPU-scale experiments.
    """

    width: int = 64
    bottleneck: int = 512
    emb_concepts: int = 256
    img_concepts: int = 128
    n_seg_classes: int = 6
    n_classes: int = 2

    def to_dict(self) -> dict:
        return asdict(self)


FULL_ARCH = ArchConfig()
# the printed decoder output count (0.5K) corresponds to a 7-way 1x1 conv
TABLE_I_ARCH = ArchConfig(n_seg_classes=7)
DESK_ARCH = ArchConfig(width=5, bottleneck=20, emb_concepts=32, img_concepts=16)

ENCODER_BLOCKS = ("enc1", "enc2", "enc3", "enc4", "enc5")
DECODER_BLOCKS = ("dec5", "dec4", "dec3", "dec2", "dec1")


class EncoderOutput(NamedTuple):
    """``final`` is ``[n, bottleneck, S/16, S/16]``; the skips are kept
    channel-major (``[width, n, S/2^k, S/2^k]``) for the decoder."""

    final: Tensor
    skips: tuple[Tensor, Tensor, Tensor, Tensor]


def _conv_init(rng: np.random.Generator, k: int, c: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    bound = 1.0 / np.sqrt(c * size * size)
    return rng.uniform(-bound, bound, (k, c, size, size)), rng.uniform(-bound, bound, k)


def _add_cbr(params: ParamStore, stats: dict, rng, name: str, cin: int, cout: int) -> None:
    w, b = _conv_init(rng, cout, cin, 3)
    params.add(f"{name}.weight", w)
    params.add(f"{name}.bias", b)
    params.add(f"{name}.gamma", np.ones(cout))
    params.add(f"{name}.beta", np.zeros(cout))
    stats[name] = RunningStats.fresh(cout)


def init_backbone(arch: ArchConfig, rng: np.random.Generator, params: ParamStore, stats: dict) -> None:
    w, bn = arch.width, arch.bottleneck
    _add_cbr(params, stats, rng, "enc1.conv1", 1, w)
    _add_cbr(params, stats, rng, "enc1.conv2", w, w)
    for blk in ("enc2", "enc3", "enc4"):
        _add_cbr(params, stats, rng, f"{blk}.conv1", w, w)
        _add_cbr(params, stats, rng, f"{blk}.conv2", w, w)
    _add_cbr(params, stats, rng, "enc5.conv1", w, bn)
    _add_cbr(params, stats, rng, "enc5.conv2", bn, bn)

    _add_cbr(params, stats, rng, "dec5.up", bn, w)
    for blk in ("dec5", "dec4", "dec3", "dec2"):
        if blk != "dec5":
            _add_cbr(params, stats, rng, f"{blk}.up", w, w)
        _add_cbr(params, stats, rng, f"{blk}.conv1", 2 * w, w)
        _add_cbr(params, stats, rng, f"{blk}.conv2", w, w)
    cw, cb = _conv_init(rng, arch.n_seg_classes, w, 1)
    params.add("dec1.weight", cw)
    params.add("dec1.bias", cb)


def _cbr(x: Tensor, params, stats, name: str, training: bool) -> Tensor:
    y = conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], pad=1, layout="CNHW")
    y = batchnorm2d(y, params[f"{name}.gamma"], params[f"{name}.beta"], stats[name], training, layout="CNHW")
    return relu(y)


def encode(patches: Tensor, params, stats, training: bool = False) -> EncoderOutput:
    """``patches[n, 1, S, S]`` with ``S % 16 == 0`` -> 512-channel map at S/16 plus four skips."""
    if patches.ndim != 4 or patches.shape[1] != 1:
        raise ValueError(f"encode: expected [n, 1, S, S] patches, got {patches.shape}")
    s = patches.shape[2]
    if s % 16 or patches.shape[3] % 16:
        raise ValueError(f"encode: patch extents must be divisible by 16, got {patches.shape[2:]}")
    x = patches.reshape(1, patches.shape[0], s, patches.shape[3])
    skips = []
    for blk in ENCODER_BLOCKS[:4]:
        x = _cbr(x, params, stats, f"{blk}.conv1", training)
        x = _cbr(x, params, stats, f"{blk}.conv2", training)
        skips.append(x)
        x = maxpool2(x)
    x = _cbr(x, params, stats, "enc5.conv1", training)
    x = _cbr(x, params, stats, "enc5.conv2", training)
    return EncoderOutput(transpose(x, (1, 0, 2, 3)), tuple(skips))


def decode(enc: EncoderOutput, params, stats, training: bool = False) -> Tensor:
    """Segmentation logits ``[n, C_seg, S, S]``; touches only ``dec*`` parameters."""
    if enc.skips is None or len(enc.skips) != 4:
        raise ValueError("decode: encoder output must carry four skip tensors")
    x = transpose(enc.final, (1, 0, 2, 3))
    for blk, skip in zip(DECODER_BLOCKS[:4], reversed(enc.skips)):
        x = _cbr(upsample2(x), params, stats, f"{blk}.up", training)
        x = concat_channels(x, skip, layout="CNHW")
        x = _cbr(x, params, stats, f"{blk}.conv1", training)
        x = _cbr(x, params, stats, f"{blk}.conv2", training)
    return conv2d(x, params["dec1.weight"], params["dec1.bias"], pad=0, layout="CNHW").transpose(1, 0, 2, 3)
