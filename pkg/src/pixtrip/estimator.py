"""scikit-learn style wrapper around the co-segmentation trainer."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .losses import LossConfig
from .metrics import binarize, evaluate
from .model import ModelConfig
from .nn import softmax_channel
from .train import TrainConfig, evaluate_split, train
from .validation import check_pairs


class CoSegmenter(BaseEstimator):
    """Pair co-segmentation trained with a segmentation loss plus IS-Triplet.

    ``X`` is always a sequence of :class:`~pixtrip.data.ImagePair`. ``fit``
    reads the masks; ``predict`` returns binary masks ``[n_pairs, 2, H, W]``
    (side A then side B); ``transform`` returns the pixel embeddings
    ``[n_pairs, 2, D, H, W]``.
    """

    def __init__(
        self,
        seg_loss="dice",
        use_is_triplet=True,
        margin=3.0,
        lambda0=1.0,
        lambda_decay=0.85,
        n_samples=5000,
        focal_gamma=2.0,
        dice_smooth=1.0,
        lr=None,
        lr_decay=0.85,
        momentum=0.9,
        weight_decay=1e-4,
        epochs=30,
        batch_size=3,
        channels=(16, 32, 64),
        embed_dim=64,
        upsample="bilinear",
        random_state=0,
    ):
        self.seg_loss = seg_loss
        self.use_is_triplet = use_is_triplet
        self.margin = margin
        self.lambda0 = lambda0
        self.lambda_decay = lambda_decay
        self.n_samples = n_samples
        self.focal_gamma = focal_gamma
        self.dice_smooth = dice_smooth
        self.lr = lr
        self.lr_decay = lr_decay
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.batch_size = batch_size
        self.channels = channels
        self.embed_dim = embed_dim
        self.upsample = upsample
        self.random_state = random_state

    def to_config(self, image_size: int = 64) -> TrainConfig:
        loss = LossConfig(
            margin_m=self.margin,
            lambda0=self.lambda0,
            lambda_decay=self.lambda_decay,
            K=self.n_samples,
            focal_gamma=self.focal_gamma,
            dice_smooth=self.dice_smooth,
            seg_loss_kind=self.seg_loss,
            use_is_triplet=self.use_is_triplet,
        )
        model = ModelConfig(channels=tuple(self.channels), embed_dim=self.embed_dim, upsample=self.upsample)
        return TrainConfig(
            lr0=self.lr,
            lr_decay=self.lr_decay,
            weight_decay=self.weight_decay,
            momentum=self.momentum,
            epochs=self.epochs,
            batch_size=self.batch_size,
            seed=self.random_state,
            image_size=image_size,
            loss=loss,
            model=model,
        )

    @classmethod
    def from_config(cls, config: TrainConfig) -> "CoSegmenter":
        return cls(
            seg_loss=config.loss.seg_loss_kind,
            use_is_triplet=config.loss.use_is_triplet,
            margin=config.loss.margin_m,
            lambda0=config.loss.lambda0,
            lambda_decay=config.loss.lambda_decay,
            n_samples=config.loss.K,
            focal_gamma=config.loss.focal_gamma,
            dice_smooth=config.loss.dice_smooth,
            lr=config.lr0,
            lr_decay=config.lr_decay,
            momentum=config.momentum,
            weight_decay=config.weight_decay,
            epochs=config.epochs,
            batch_size=config.batch_size,
            channels=tuple(config.model.channels),
            embed_dim=config.model.embed_dim,
            upsample=config.model.upsample,
            random_state=config.seed,
        )

    def fit(self, X, y=None, eval_set=None, out_dir=None):
        divisor = 2 ** len(self.channels)
        pairs = check_pairs(X, divisor=divisor)
        val = check_pairs(eval_set, divisor=divisor) if eval_set is not None else None
        self.config_ = self.to_config(image_size=pairs[0].image_a.shape[1])
        self.runlog_, self.model_ = train(self.config_, pairs, val, out_dir=out_dir)
        self.n_features_in_ = pairs[0].image_a.shape[0]
        return self

    def _forward(self, X, batch_size=8):
        check_is_fitted(self, "model_")
        pairs = check_pairs(X, require_masks=False, divisor=2 ** len(self.channels))
        a = np.stack([p.image_a for p in pairs])
        b = np.stack([p.image_b for p in pairs])
        outs = []
        with T.no_grad():
            for s in range(0, len(pairs), batch_size):
                outs.append([o.data for o in self.model_.forward(a[s : s + batch_size], b[s : s + batch_size])])
        return [np.concatenate([o[i] for o in outs]) for i in range(4)]

    def decision_function(self, X) -> np.ndarray:
        """Two-channel logits, ``[n_pairs, 2 sides, 2 classes, H, W]``."""
        _, la, _, lb = self._forward(X)
        return np.stack([la, lb], axis=1)

    def predict_proba(self, X) -> np.ndarray:
        """Foreground probability per pixel, ``[n_pairs, 2, H, W]``."""
        logits = self.decision_function(X)
        return np.stack([softmax_channel(logits[:, s]).data[:, 1] for s in range(2)], axis=1)

    def predict(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        return np.stack([binarize(logits[:, s]) for s in range(2)], axis=1)

    def transform(self, X) -> np.ndarray:
        ea, _, eb, _ = self._forward(X)
        return np.stack([ea, eb], axis=1)

    def score(self, X, y=None) -> float:
        """Mean Jaccard over both images of every pair."""
        check_is_fitted(self, "model_")
        return evaluate_split(self.model_, check_pairs(X)).jaccard

    def evaluate(self, X):
        check_is_fitted(self, "model_")
        return evaluate_split(self.model_, check_pairs(X))

    def per_image_records(self, X):
        pairs = check_pairs(X)
        masks = self.predict(pairs)
        return [evaluate(masks[i, s], (p.mask_a, p.mask_b)[s]) for i, p in enumerate(pairs) for s in range(2)]
