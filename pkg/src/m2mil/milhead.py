"""Two-level MIL classification head.

Each patch's final feature grid is an inner bag pooled by the embedding
GCP; the resulting patch embeddings form the outer bag pooled by the image
GCP, followed by a two-way classifier.
"""

from __future__ import annotations

import numpy as np

from .backbone import ArchConfig
from .gcp import ConceptBank, gcp_forward
from .tensor import ParamStore, Tensor, linear, relu, softmax

CONCEPT_PARAMS = ("emb.concepts", "img.concepts")


def init_head(arch: ArchConfig, rng: np.random.Generator, params: ParamStore) -> None:
    e, i = arch.emb_concepts, arch.img_concepts
    params.add("emb.concepts", ConceptBank.random(e, arch.bottleneck, rng).concepts)
    params.add("img.concepts", ConceptBank.random(i, e, rng).concepts)
    for name, dout, din in (("emb.map", e, e), ("img.map", i, i), ("cls", arch.n_classes, i)):
        bound = 1.0 / np.sqrt(din)
        params.add(f"{name}.weight", rng.uniform(-bound, bound, (dout, din)))
        params.add(f"{name}.bias", rng.uniform(-bound, bound, dout))


def embed_patches(features: Tensor, params) -> Tensor:
    """``features[n, d, h, w]`` -> patch embeddings ``[n, emb_concepts]``."""
    if features.ndim != 4:
        raise ValueError(f"embed_patches: expected [n, d, h, w] features, got {features.shape}")
    n, d, h, w = features.shape
    if d != params["emb.concepts"].shape[1]:
        raise ValueError(f"embed_patches: feature depth {d} does not match concepts {params['emb.concepts'].shape}")
    inst = features.reshape(n, d, h * w).transpose(0, 2, 1)
    pooled = gcp_forward(inst, params["emb.concepts"])
    return relu(linear(pooled, params["emb.map.weight"], params["emb.map.bias"]))


def embed_patch(features: Tensor, params) -> Tensor:
    """Single-patch form: ``[d, h, w]`` -> ``[emb_concepts]``."""
    if features.ndim != 3:
        raise ValueError(f"embed_patch: expected [d, h, w], got {features.shape}")
    return embed_patches(features.reshape(1, *features.shape), params).reshape(-1)


def classify_bag(embeddings: Tensor, params) -> tuple[Tensor, float]:
    """Patch embeddings ``[n, e]`` -> (two logits, severe-class probability)."""
    if embeddings.ndim != 2 or embeddings.shape[0] == 0:
        raise ValueError(f"classify_bag: need a non-empty [n, e] bag, got {embeddings.shape}")
    pooled = gcp_forward(embeddings, params["img.concepts"])
    hidden = relu(linear(pooled, params["img.map.weight"], params["img.map.bias"]))
    logits = linear(hidden, params["cls.weight"], params["cls.bias"])
    prob = float(softmax(logits.detach(), axis=0).data[1])
    return logits, prob
