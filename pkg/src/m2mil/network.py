"""The joint network: shared encoder, segmentation decoder, and MIL head."""

from __future__ import annotations

import numpy as np

from .backbone import ArchConfig, EncoderOutput, decode, encode, init_backbone
from .gcp import gcp_regularize
from .milhead import CONCEPT_PARAMS, classify_bag, embed_patches, init_head
from .tensor import ParamStore, RunningStats, Tensor, load_checkpoint, save_checkpoint

INPUT_SCALE = 1.0 / 255.0

# block -> parameter-name prefixes, in the order the architecture table lists them
BLOCK_PREFIXES = {
    "Encoding block 1": ("enc1.",),
    "Encoding block 2": ("enc2.",),
    "Encoding block 3": ("enc3.",),
    "Encoding block 4": ("enc4.",),
    "Encoding block 5": ("enc5.",),
    "Embedding-Level MIL": ("emb.",),
    "Image-Level MIL": ("img.",),
    "Classifier": ("cls.",),
    "Decoding block 5": ("dec5.",),
    "Decoding block 4": ("dec4.",),
    "Decoding block 3": ("dec3.",),
    "Decoding block 2": ("dec2.",),
    "Decoding block 1": ("dec1.",),
}


class M2UNetNet:
    """Parameters, batchnorm buffers, and forward passes of the joint network."""

    def __init__(self, arch: ArchConfig, seed: int = 0):
        self.arch = arch
        rng = np.random.default_rng(seed)
        self.params = ParamStore()
        self.stats: dict[str, RunningStats] = {}
        init_backbone(arch, rng, self.params, self.stats)
        init_head(arch, rng, self.params)

    def block_counts(self) -> dict[str, int]:
        return {blk: sum(self.params.count(p) for p in prefixes) for blk, prefixes in BLOCK_PREFIXES.items()}

    def encode(self, patches: np.ndarray, training: bool) -> EncoderOutput:
        x = Tensor(np.asarray(patches, dtype=np.float64)[:, None] * INPUT_SCALE)
        return encode(x, self.params, self.stats, training)

    def segment_logits(self, enc: EncoderOutput, training: bool) -> Tensor:
        return decode(enc, self.params, self.stats, training)

    def classify(self, enc: EncoderOutput) -> tuple[Tensor, float]:
        return classify_bag(embed_patches(enc.final, self.params), self.params)

    def predict_bag(self, patches: np.ndarray) -> tuple[np.ndarray, float]:
        """Eval-mode logits and severe probability for one bag ``[n, S, S]``."""
        logits, prob = self.classify(self.encode(patches, training=False))
        return logits.data, prob

    def segment_patches(self, patches: np.ndarray) -> np.ndarray:
        """Eval-mode label maps ``[n, S, S]``."""
        logits = self.segment_logits(self.encode(patches, training=False), training=False)
        return logits.data.argmax(axis=1)

    def regularize_concepts(self) -> None:
        for name in CONCEPT_PARAMS:
            gcp_regularize(self.params[name])

    # -- persistence

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = dict(self.params.arrays())
        for name, st in self.stats.items():
            out[f"{name}.running_mean"] = st.mean
            out[f"{name}.running_var"] = st.var
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = set(self.state_arrays())
        if set(arrays) != expected:
            missing = sorted(expected - set(arrays))[:3]
            extra = sorted(set(arrays) - expected)[:3]
            raise ValueError(f"checkpoint does not match architecture (missing {missing}, unexpected {extra})")
        for name in self.params:
            if arrays[name].shape != self.params[name].shape:
                raise ValueError(f"checkpoint shape {arrays[name].shape} for {name} != {self.params[name].shape}")
            self.params[name].data = arrays[name].copy()
        for name, st in self.stats.items():
            st.mean = arrays[f"{name}.running_mean"].copy()
            st.var = arrays[f"{name}.running_var"].copy()

    def save(self, path, meta: dict | None = None) -> None:
        meta = dict(meta or {})
        meta["arch"] = self.arch.to_dict()
        save_checkpoint(path, self.state_arrays(), meta)

    @classmethod
    def load(cls, path) -> tuple[M2UNetNet, dict]:
        arrays, meta = load_checkpoint(path)
        net = cls(ArchConfig(**meta["arch"]))
        net.load_arrays(arrays)
        return net, meta
