"""Scikit-learn style facade over the shape VAE.

``HierarchicalShapeVAE`` follows the estimator conventions: constructor
arguments are stored verbatim, :meth:`fit` trains and sets trailing-
underscore attributes, ``get_params``/``set_params``/``clone`` work, and
``transform``/``inverse_transform`` map between shape trees and latent
vectors.  ``X`` is a sequence of :class:`~structgen.shapes.ShapeTree`
rather than a numeric matrix.
"""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import latent as latent_ops
from .losses import DEFAULT_BETA, PartMatcher, compute_shape_loss
from .model import ModelConfig, ShapeVAE, to_shape_tree
from .shapes import ShapeTree, get_vocabulary
from .training import TrainConfig, train

__all__ = ["HierarchicalShapeVAE"]


class HierarchicalShapeVAE(TransformerMixin, BaseEstimator):
    """Variational autoencoder over part-hierarchy shapes.

    Parameters mirror :class:`~structgen.model.ModelConfig` and
    :class:`~structgen.training.TrainConfig`; see those classes for
    semantics.  ``model_seed`` controls weight initialization, ``seed``
    the training-time shuffling and latent noise.
    """

    def __init__(
        self,
        category: str = "chair",
        feature_dim: int = 256,
        hidden_dim: int = 256,
        mp_rounds: int = 2,
        decode_depth_cap: int = 4,
        no_edges: bool = False,
        no_decoder_mp: bool = False,
        epochs: int = 200,
        batch_size: int = 32,
        lr: float = 1e-3,
        lr_halve_every: Optional[int] = 50,
        clip_norm: float = 5.0,
        mode: str = "vae",
        beta: float = DEFAULT_BETA,
        per_face: int = 9,
        seed: int = 0,
        model_seed: int = 0,
        no_normal_loss: bool = False,
        no_consistency_loss: bool = False,
        threads: int = 1,
    ):
        self.category = category
        self.feature_dim = feature_dim
        self.hidden_dim = hidden_dim
        self.mp_rounds = mp_rounds
        self.decode_depth_cap = decode_depth_cap
        self.no_edges = no_edges
        self.no_decoder_mp = no_decoder_mp
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_halve_every = lr_halve_every
        self.clip_norm = clip_norm
        self.mode = mode
        self.beta = beta
        self.per_face = per_face
        self.seed = seed
        self.model_seed = model_seed
        self.no_normal_loss = no_normal_loss
        self.no_consistency_loss = no_consistency_loss
        self.threads = threads

    # ------------------------------------------------------------------
    def _model_config(self) -> ModelConfig:
        vocab = get_vocabulary(self.category)
        return ModelConfig(
            label_count=len(vocab.labels),
            feature_dim=self.feature_dim,
            hidden_dim=self.hidden_dim,
            mp_rounds=self.mp_rounds,
            decode_depth_cap=self.decode_depth_cap,
            no_edges=self.no_edges,
            no_decoder_mp=self.no_decoder_mp,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            lr=self.lr,
            lr_halve_every=self.lr_halve_every,
            clip_norm=self.clip_norm,
            mode=self.mode,
            beta=self.beta,
            per_face=self.per_face,
            seed=self.seed,
            no_normal_loss=self.no_normal_loss,
            no_consistency_loss=self.no_consistency_loss,
            threads=self.threads,
        )

    def _check_shapes(self, X) -> List[ShapeTree]:
        shapes = list(X)
        if not shapes:
            raise ValueError("X must contain at least one shape")
        for s in shapes:
            if not isinstance(s, ShapeTree):
                raise TypeError(f"expected ShapeTree elements, got {type(s).__name__}")
            if s.category != self.category:
                raise ValueError(
                    f"shape category {s.category!r} does not match estimator "
                    f"category {self.category!r}"
                )
        return shapes

    # ------------------------------------------------------------------
    def fit(self, X: Sequence[ShapeTree], y=None, out_dir=None):
        shapes = self._check_shapes(X)
        self.model_ = ShapeVAE(self._model_config(), seed=self.model_seed)
        self.history_ = train(self.model_, shapes, self._train_config(), out_dir=out_dir)
        self.vocabulary_ = get_vocabulary(self.category)
        return self

    def transform(self, X: Sequence[ShapeTree]) -> np.ndarray:
        """Posterior-mean latent vectors, one row per shape."""
        check_is_fitted(self, "model_")
        shapes = self._check_shapes(X)
        return np.vstack([self.model_.encode_latent(s) for s in shapes])

    def inverse_transform(self, Z: np.ndarray, max_depth: Optional[int] = None) -> List[ShapeTree]:
        """Decode latent rows into concrete shape trees."""
        check_is_fitted(self, "model_")
        Z = np.asarray(Z, dtype=np.float64)
        if Z.ndim == 1:
            Z = Z[None, :]
        out = []
        for row in Z:
            decode = self.model_.decode_free(row[None, :], max_depth=max_depth)
            out.append(to_shape_tree(decode, self.vocabulary_))
        return out

    def predict(self, X: Sequence[ShapeTree], max_depth: Optional[int] = None) -> List[ShapeTree]:
        """Reconstructions through the posterior mean."""
        check_is_fitted(self, "model_")
        shapes = self._check_shapes(X)
        out = []
        for s in shapes:
            decode = latent_ops.reconstruct(self.model_, s, max_depth=max_depth)
            out.append(to_shape_tree(decode, self.vocabulary_))
        return out

    def sample(self, n: int, seed: int = 0, max_depth: Optional[int] = None) -> List[ShapeTree]:
        """Shapes decoded from prior draws (empty decodes are redrawn)."""
        check_is_fitted(self, "model_")
        decodes, _ = latent_ops.sample_decodes(self.model_, n, seed=seed, max_depth=max_depth)
        return [to_shape_tree(d, self.vocabulary_) for d in decodes]

    def score(self, X: Sequence[ShapeTree], y=None) -> float:
        """Negative mean training objective (higher is better)."""
        check_is_fitted(self, "model_")
        shapes = self._check_shapes(X)
        matcher = PartMatcher(self.per_face)
        total = 0.0
        for s in shapes:
            _, breakdown = compute_shape_loss(
                self.model_,
                s,
                matcher,
                mode=self.mode,
                beta=self.beta,
                eps=None,
                no_normal_loss=self.no_normal_loss,
                no_consistency_loss=self.no_consistency_loss,
            )
            total += breakdown.total
        return -total / len(shapes)
