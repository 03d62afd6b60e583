"""scikit-learn style wrappers around the linkage models.

Rows of ``X`` are binary case vectors, ``y`` holds series labels (``None`` for
one-offs) and ``spacetime`` is an optional ``(n, 3)`` array of x_km, y_km,
t_days. Pair scores are similarities in (0, 1]; higher means more likely linked.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_binary_matrix, check_groups, check_pairs, check_spacetime
from .dataset import CaseTable, FeatureSchema
from .evaluation import (
    fit_logreg,
    logreg_pair_scores,
    pair_distances,
    resolve_method,
    similarity,
)
from .network import NetConfig, encode
from .training import FoldAssignment, LossConfig, TrainConfig, fold_seeds, sample_pairs, train_fold


def _table(X, groups, spacetime) -> CaseTable:
    n, m = X.shape
    st = check_spacetime(spacetime, n)
    width = len(str(n))
    return CaseTable(
        FeatureSchema.uniform([f"x{j}" for j in range(m)]),
        tuple(f"row{i:0{width}d}" for i in range(n)),
        tuple(groups) if groups is not None else (None,) * n,
        X,
        st[:, :2],
        st[:, 2],
    )


def _all_training(table: CaseTable) -> FoldAssignment:
    # every case in fold 0; fold 1 is an empty stand-in for validation
    return FoldAssignment(table.case_ids, np.zeros(len(table), dtype=np.int64), 2)


class SiameseLinker(TransformerMixin, BaseEstimator):
    """Siamese autoencoder trained with contrastive plus reconstruction loss."""

    def __init__(
        self,
        hidden_dim=128,
        latent_dim=8,
        depth=2,
        activation="relu",
        skip_connections=False,
        fusion="decoder_add",
        naive=False,
        epochs=2,
        batch_size=128,
        learning_rate=0.001,
        noise_sigma=0.05,
        weight_contrast=1.0,
        weight_recon=0.2,
        margin=5.0,
        random_state=0,
    ):
        self.hidden_dim = hidden_dim
        self.latent_dim = latent_dim
        self.depth = depth
        self.activation = activation
        self.skip_connections = skip_connections
        self.fusion = fusion
        self.naive = naive
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.noise_sigma = noise_sigma
        self.weight_contrast = weight_contrast
        self.weight_recon = weight_recon
        self.margin = margin
        self.random_state = random_state

    def _configs(self, dims: int):
        net = NetConfig(
            input_dim=dims,
            hidden_dim=self.hidden_dim,
            latent_dim=self.latent_dim,
            depth=self.depth,
            activation=self.activation,
            skip_connections=self.skip_connections,
            fusion=self.fusion,
        )
        loss = LossConfig(self.weight_contrast, self.weight_recon, self.margin)
        train = TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            noise_sigma=self.noise_sigma,
            seed=int(self.random_state or 0),
        )
        return resolve_method("naive_siamese" if self.naive else "ours", net, loss) + (train,)

    def fit(self, X, y, spacetime=None):
        X = check_binary_matrix(X)
        table = _table(X, check_groups(y, len(X)), spacetime)
        net, loss, train = self._configs(X.shape[1])
        self.params_, self.history_ = train_fold(table, _all_training(table), 1, net, train, loss)
        self.net_config_, self.loss_config_ = net, loss
        self.n_features_in_ = X.shape[1]
        return self

    def _checked(self, X):
        check_is_fitted(self, "params_")
        X = check_binary_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, fitted with {self.n_features_in_}")
        return X

    def transform(self, X):
        """Latent codes; undefined for input_concat, whose codes depend on the pair."""
        X = self._checked(X)
        if self.net_config_.fusion == "input_concat":
            raise ValueError("input_concat codes depend on the pair; use score_pairs")
        return encode(self.params_, X.astype(float), self.net_config_)

    def pair_distances(self, X, pairs, spacetime=None):
        X = self._checked(X)
        ia, ib = check_pairs(pairs, len(X))
        return pair_distances(self.params_, _table(X, None, spacetime), self.net_config_, ia, ib)

    def score_pairs(self, X, pairs, spacetime=None):
        return similarity(self.pair_distances(X, pairs, spacetime), self.loss_config_.margin)

    def predict(self, X, pairs, spacetime=None, threshold=0.5):
        return (self.score_pairs(X, pairs, spacetime) >= threshold).astype(np.int64)


class LogisticPairLinker(BaseEstimator):
    """Logistic regression on ``|x_i - x_j|`` plus the pair's geo-temporal features."""

    def __init__(self, epochs=2, batch_size=128, learning_rate=0.1, random_state=0):
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y, spacetime=None):
        X = check_binary_matrix(X)
        table = _table(X, check_groups(y, len(X)), spacetime)
        train = TrainConfig(epochs=self.epochs, batch_size=self.batch_size, noise_sigma=0.0,
                            seed=int(self.random_state or 0))
        _, sample_seq = fold_seeds(train.seed, 1)
        batches = sample_pairs(table, _all_training(table), [0], train, np.random.default_rng(sample_seq))
        self.model_ = fit_logreg(batches, self.epochs, self.learning_rate)
        self.n_features_in_ = X.shape[1]
        return self

    def score_pairs(self, X, pairs, spacetime=None):
        check_is_fitted(self, "model_")
        X = check_binary_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, fitted with {self.n_features_in_}")
        ia, ib = check_pairs(pairs, len(X))
        return logreg_pair_scores(self.model_, _table(X, None, spacetime), ia, ib)

    def predict(self, X, pairs, spacetime=None, threshold=0.5):
        return (self.score_pairs(X, pairs, spacetime) >= threshold).astype(np.int64)


__all__ = ["SiameseLinker", "LogisticPairLinker"]
