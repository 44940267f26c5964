"""scikit-learn style wrappers around preprocessing and the joint network."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .backbone import ArchConfig
from .losses import LossConfig
from .phantom import CaseRecord
from .preprocess import body_crop, build_bag, window_and_normalize
from .trainer import CaseData, OptimConfig, TrainConfig, predict_cases, segment_volume, train_fold
from .validation import check_bag, check_labels, check_masks, check_volumes


class VolumePreprocessor(TransformerMixin, BaseEstimator):
    """Body crop followed by pulmonary windowing; stateless.

    ``transform`` maps raw pseudo-HU volumes to cropped volumes in [0, 255].
    The crop boxes of the last call are kept in ``boxes_``.
    """

    def __init__(self, crop_min_size: int = 256):
        self.crop_min_size = crop_min_size

    def fit(self, X, y=None):
        check_volumes(X)
        self.n_features_in_ = 3
        return self

    def transform(self, X):
        out, boxes = [], []
        for v in check_volumes(X):
            cropped, box = body_crop(v, self.crop_min_size)
            out.append(window_and_normalize(cropped).astype(np.float32))
            boxes.append(box)
        self.boxes_ = boxes
        return out


class BagSampler(TransformerMixin, BaseEstimator):
    """Draw one bag of ``bag_size`` random ``patch_size`` patches per preprocessed volume."""

    def __init__(self, bag_size: int = 200, patch_size: int = 128, random_state: int | None = 0):
        self.bag_size = bag_size
        self.patch_size = patch_size
        self.random_state = random_state

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        rng = np.random.default_rng(self.random_state)
        return [build_bag(np.asarray(v), None, 0, self.bag_size, self.patch_size, rng).patches
                for v in check_volumes(X)]


class M2UNetClassifier(ClassifierMixin, BaseEstimator):
    """Joint lobe segmentation and severity classification from raw volumes.

    ``fit(X, y, masks=None)`` takes raw pseudo-HU volumes, binary severity
    labels and, optionally, per-volume lobe label maps (``None`` where no
    mask exists).  Defaults follow the desk-scale profile.
    """

    def __init__(self, lam: float = 0.01, lr: float = 0.01, epochs: int = 20, bag_size: int = 32,
                 patch_size: int = 32, crop_min_size: int = 64, width: int = 5, bottleneck: int = 20,
                 emb_concepts: int = 32, img_concepts: int = 16, n_seg_classes: int = 6,
                 momentum: float = 0.9, weight_decay: float = 1e-4, eval_draws: int = 1,
                 random_state: int = 0):
        self.lam = lam
        self.lr = lr
        self.epochs = epochs
        self.bag_size = bag_size
        self.patch_size = patch_size
        self.crop_min_size = crop_min_size
        self.width = width
        self.bottleneck = bottleneck
        self.emb_concepts = emb_concepts
        self.img_concepts = img_concepts
        self.n_seg_classes = n_seg_classes
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.eval_draws = eval_draws
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        arch = ArchConfig(width=self.width, bottleneck=self.bottleneck, emb_concepts=self.emb_concepts,
                          img_concepts=self.img_concepts, n_seg_classes=self.n_seg_classes)
        optim = OptimConfig(lr0=self.lr, momentum=self.momentum, weight_decay=self.weight_decay,
                            epochs=self.epochs, seed=self.random_state)
        return TrainConfig(optim=optim, loss=LossConfig(lam=self.lam, n_seg_classes=self.n_seg_classes),
                           arch=arch, bag_size=self.bag_size, patch_size=self.patch_size,
                           crop_min_size=self.crop_min_size, eval_draws=self.eval_draws)

    def _cases(self, vols, labels, masks) -> list[CaseData]:
        cases = []
        for i, (v, lab, m) in enumerate(zip(vols, labels, masks)):
            cropped, box = body_crop(v, self.crop_min_size)
            rec = CaseRecord(f"case{i:04d}", "", None, bool(lab), f"case{i:04d}")
            cases.append(CaseData(rec, window_and_normalize(cropped).astype(np.float32),
                                  None if m is None else m[box]))
        return cases

    def fit(self, X, y, masks=None):
        vols = check_volumes(X)
        labels = check_labels(y, len(vols))
        ms = check_masks(masks, vols, self.n_seg_classes)
        cfg = self._config()
        self.net_, self.history_ = train_fold(self._cases(vols, labels, ms), cfg)
        self.classes_ = np.array([0, 1])
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        vols = check_volumes(X)
        cases = self._cases(vols, np.zeros(len(vols), dtype=int), [None] * len(vols))
        p = np.asarray(predict_cases(self.net_, cases, self._config(), seed=self.random_state + 1))
        return np.stack([1 - p, p], axis=1)

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def predict_bag(self, patches) -> float:
        """Severe probability for one preprocessed bag ``[n, S, S]``."""
        check_is_fitted(self, "net_")
        return self.net_.predict_bag(check_bag(patches))[1]

    def segment(self, X) -> list[np.ndarray]:
        """Lobe label maps at the input extents; voxels outside the body crop are 0."""
        check_is_fitted(self, "net_")
        out = []
        for v in check_volumes(X):
            cropped, box = body_crop(v, self.crop_min_size)
            full = np.zeros(v.shape, dtype=np.uint8)
            full[box] = segment_volume(self.net_, window_and_normalize(cropped), self.patch_size)
            out.append(full)
        return out
