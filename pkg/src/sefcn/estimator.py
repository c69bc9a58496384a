"""scikit-learn style wrapper around network assembly and training."""
import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .architectures import NetworkSpec, assemble_network
from .losses import dice_score
from .se import SEConfig
from .tensor import InvalidShapeError
from .trainer import TrainConfig, predict_proba, train


def check_images(X, dtype=np.float32):
    """Coerce ``X`` to a finite (N, C, H, W) array; (N, H, W) gains C=1."""
    X = np.asarray(X, dtype=dtype)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise InvalidShapeError(f"images must be (N, H, W) or (N, C, H, W), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no images given")
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or infinite values")
    return X


def check_labels(y, X=None, num_classes=None):
    """Coerce ``y`` to an int64 (N, H, W) label array matching ``X``."""
    arr = np.asarray(y)
    if arr.ndim == 4 and arr.shape[1] == 1:
        arr = arr[:, 0]
    if arr.ndim != 3:
        raise InvalidShapeError(f"labels must be (N, H, W), got {arr.shape}")
    labels = arr.astype(np.int64)
    if (labels != arr).any():
        raise ValueError("labels must be integer class ids")
    if labels.min() < 0 or (num_classes is not None and labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    if X is not None and (labels.shape[0] != X.shape[0] or labels.shape[1:] != X.shape[2:]):
        raise InvalidShapeError(f"labels {labels.shape} do not match images {X.shape}")
    return labels


class SEFCNSegmenter(BaseEstimator):
    """Semantic segmentation with an encoder/decoder network and SE blocks.

    ``num_classes=None`` infers the class count from the training labels.
    After ``fit`` the trained network is ``network_`` and the per-epoch
    metric rows are ``history_``.
    """

    def __init__(self, family="sdnet", depth=4, channels=64, num_classes=None,
                 se_mode="scse", r=2, aggregation="maxout", position="P5", skip_config=1,
                 lr0=0.01, momentum=0.95, weight_decay=1e-4, batch_size=4, max_epochs=20,
                 lam=1.0, patience=10, seed=0):
        self.family = family
        self.depth = depth
        self.channels = channels
        self.num_classes = num_classes
        self.se_mode = se_mode
        self.r = r
        self.aggregation = aggregation
        self.position = position
        self.skip_config = skip_config
        self.lr0 = lr0
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.lam = lam
        self.patience = patience
        self.seed = seed

    def _spec(self, num_classes, in_channels):
        return NetworkSpec(family=self.family, depth=self.depth, channels=self.channels,
                           num_classes=num_classes, in_channels=in_channels,
                           se=SEConfig(self.se_mode, self.r, self.aggregation),
                           position=self.position, skip_config=self.skip_config)

    def _train_config(self):
        return TrainConfig(lr0=self.lr0, momentum=self.momentum,
                           weight_decay=self.weight_decay, batch_size=self.batch_size,
                           max_epochs=self.max_epochs, seed=self.seed, lam=self.lam,
                           patience=self.patience)

    def fit(self, X, y, X_val=None, y_val=None, run_dir=None):
        X = check_images(X)
        y = check_labels(y, X, self.num_classes)
        k = self.num_classes or int(y.max()) + 1
        data = {"train": (X, y)}
        if X_val is not None:
            X_val = check_images(X_val)
            data["val"] = (X_val, check_labels(y_val, X_val, k))
        network = assemble_network(self._spec(max(k, 2), X.shape[1]), seed=self.seed)
        network.check_input_shape(X.shape)
        self.history_ = train(network, data, self._train_config(), run_dir=run_dir)
        self.network_ = network
        self.n_classes_ = max(k, 2)
        self.classes_ = np.arange(self.n_classes_)
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "network_")
        X = check_images(X)
        if X.shape[1] != self.network_.spec.in_channels:
            raise InvalidShapeError(
                f"fitted on {self.network_.spec.in_channels} channels, got {X.shape[1]}")
        return predict_proba(self.network_, X)

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def score(self, X, y):
        """Global Dice of the predicted label maps."""
        X = check_images(X)
        y = check_labels(y, X)
        return dice_score(self.predict(X), y, "global", self.n_classes_)
