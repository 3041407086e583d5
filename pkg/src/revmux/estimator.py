"""Scikit-learn style facades over the encoder and the multiplexed pipeline.

Both estimators follow the usual conventions: constructors only store
parameters, fitted state lives in trailing-underscore attributes, and
``fit`` returns self so instances compose with sklearn tooling (clone,
cross-validation, pipelines over precomputed text lists).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError

from .backbone import EncoderConfig, EncoderModel
from .data import ArrayDataset, Example, Vocab, tokenize_dataset
from .evaluation import evaluate_rounds, partition_round
from .pipeline import (
    PretrainConfig,
    TrainConfig,
    build_composite_batch,
    revmux_forward,
    train_adapters,
    train_backbone,
)
from .adapters import RevMuxAdapters
from .tensor import no_grad


def as_examples(X, y=None) -> list[Example]:
    """Normalize text input: str entries or (text_a, text_b) pairs."""
    if y is None:
        y = np.zeros(len(X), dtype=np.int64)
    if len(X) != len(y):
        raise ValueError(f"X has {len(X)} rows but y has {len(y)}")
    examples = []
    for text, label in zip(X, y):
        if isinstance(text, str):
            examples.append(Example(text_a=text, label=int(label)))
        elif isinstance(text, (tuple, list)) and len(text) == 2:
            examples.append(Example(text_a=text[0], text_b=text[1], label=int(label)))
        else:
            raise ValueError(f"each input must be a string or a pair of strings, got {text!r}")
    return examples


def check_labels(y) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"y must be 1-dimensional, got shape {y.shape}")
    if y.size == 0:
        raise ValueError("y is empty")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(y == y.astype(np.int64)):
            raise ValueError("labels must be integers")
        y = y.astype(np.int64)
    return y


class EncoderTextClassifier(BaseEstimator, ClassifierMixin):
    """Single-input transformer text classifier."""

    def __init__(
        self,
        d_model: int = 64,
        n_heads: int = 4,
        n_layers: int = 4,
        ffn_dim: int = 128,
        max_seq_len: int = 16,
        vocab_size: int = 128,
        dropout_rate: float = 0.1,
        pooling: str = "mean",
        activation: str = "gelu",
        lr: float = 1e-3,
        epochs: int = 20,
        batch_size: int = 32,
        patience: int = 3,
        validation_fraction: float = 0.2,
        seed: int = 0,
    ):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_layers = n_layers
        self.ffn_dim = ffn_dim
        self.max_seq_len = max_seq_len
        self.vocab_size = vocab_size
        self.dropout_rate = dropout_rate
        self.pooling = pooling
        self.activation = activation
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.seed = seed

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predict")

    def _encode(self, X, y=None) -> ArrayDataset:
        return tokenize_dataset(as_examples(X, y), self.vocab_, self.max_seq_len)

    def fit(self, X, y) -> "EncoderTextClassifier":
        y = check_labels(y)
        self.classes_ = np.unique(y)
        index_of = {c: i for i, c in enumerate(self.classes_)}
        encoded = np.array([index_of[v] for v in y], dtype=np.int64)
        examples = as_examples(X, encoded)
        texts = [ex.text_a + (" " + ex.text_b if ex.text_b else "") for ex in examples]
        self.vocab_ = Vocab.build(texts, max_size=self.vocab_size)
        cfg = EncoderConfig(
            vocab_size=self.vocab_size,
            d_model=self.d_model,
            n_heads=self.n_heads,
            n_layers=self.n_layers,
            ffn_dim=self.ffn_dim,
            max_seq_len=self.max_seq_len,
            n_classes=len(self.classes_),
            dropout_rate=self.dropout_rate,
            pooling=self.pooling,
            activation=self.activation,
        )
        self.model_ = EncoderModel(cfg, seed=self.seed)
        data = tokenize_dataset(examples, self.vocab_, self.max_seq_len)
        n_val = int(len(data) * self.validation_fraction)
        rng = np.random.default_rng(self.seed)
        order = rng.permutation(len(data))
        val = data.take(order[:n_val]) if n_val else None
        train = data.take(order[n_val:])
        self.history_ = train_backbone(
            self.model_, train, val,
            PretrainConfig(
                lr=self.lr, epochs=self.epochs, batch_size=self.batch_size,
                seed=self.seed, patience=self.patience,
            ),
        )
        return self

    def decision_scores(self, X) -> np.ndarray:
        self._check_fitted()
        data = self._encode(X)
        out = []
        for start in range(0, len(data), self.batch_size):
            tokens = data.tokens[start : start + self.batch_size]
            masks = data.masks[start : start + self.batch_size]
            with no_grad():
                logits = self.model_.pool_and_classify(self.model_.forward_full(tokens, masks), masks)
            out.append(logits.data)
        return np.concatenate(out, axis=0)

    def predict_proba(self, X) -> np.ndarray:
        scores = self.decision_scores(X)
        shifted = scores - scores.max(axis=-1, keepdims=True)
        exp = np.exp(shifted)
        return exp / exp.sum(axis=-1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        scores = self.decision_scores(X)
        return self.classes_[np.argmax(scores, axis=-1)]


class MultiplexedTextClassifier(BaseEstimator, ClassifierMixin):
    """Adapter-trained multiplexed classifier over a frozen or tuned encoder.

    ``backbone`` may be a fitted EncoderTextClassifier to reuse; otherwise a
    fresh one is trained from the backbone_params dict during fit.
    """

    def __init__(
        self,
        n_inputs: int = 2,
        prefill_layers: int | None = None,
        infonce_weight: float = 0.5,
        mode: str = "fe",
        coupling_hidden: int | None = None,
        lr: float = 1e-3,
        epochs: int = 10,
        groups_per_batch: int = 8,
        patience: int = 3,
        validation_fraction: float = 0.2,
        rounds: int = 10,
        seed: int = 0,
        backbone: EncoderTextClassifier | None = None,
        backbone_params: dict | None = None,
    ):
        self.n_inputs = n_inputs
        self.prefill_layers = prefill_layers
        self.infonce_weight = infonce_weight
        self.mode = mode
        self.coupling_hidden = coupling_hidden
        self.lr = lr
        self.epochs = epochs
        self.groups_per_batch = groups_per_batch
        self.patience = patience
        self.validation_fraction = validation_fraction
        self.rounds = rounds
        self.seed = seed
        self.backbone = backbone
        self.backbone_params = backbone_params

    def _check_fitted(self):
        if not hasattr(self, "adapters_"):
            raise NotFittedError("call fit before predict")

    def fit(self, X, y) -> "MultiplexedTextClassifier":
        y = check_labels(y)
        if self.backbone is not None:
            if not hasattr(self.backbone, "model_"):
                raise NotFittedError("backbone estimator must already be fitted")
            self.backbone_ = self.backbone
        else:
            self.backbone_ = EncoderTextClassifier(
                **{**(self.backbone_params or {}), "seed": self.seed}
            )
            self.backbone_.fit(X, y)
        self.classes_ = self.backbone_.classes_
        index_of = {c: i for i, c in enumerate(self.classes_)}
        encoded = np.array([index_of[v] for v in y], dtype=np.int64)
        model = self.backbone_.model_
        depth = model.cfg.n_layers // 2 if self.prefill_layers is None else self.prefill_layers
        self.prefill_layers_ = depth
        self.adapters_ = RevMuxAdapters(
            model.cfg.d_model, self.n_inputs, hidden=self.coupling_hidden, seed=self.seed
        )
        data = tokenize_dataset(as_examples(X, encoded), self.backbone_.vocab_, model.cfg.max_seq_len)
        n_val = int(len(data) * self.validation_fraction)
        rng = np.random.default_rng(self.seed)
        order = rng.permutation(len(data))
        val = data.take(order[:n_val]) if n_val >= self.n_inputs else None
        train = data.take(order[n_val:] if val is not None else order)
        self.history_ = train_adapters(
            model, self.adapters_, train, val,
            TrainConfig(
                n_inputs=self.n_inputs,
                prefill_layers=depth,
                infonce_weight=self.infonce_weight,
                mode=self.mode,
                lr=self.lr,
                epochs=self.epochs,
                groups_per_batch=self.groups_per_batch,
                seed=self.seed,
                patience=self.patience,
            ),
        )
        return self

    def predict(self, X) -> np.ndarray:
        """One seeded grouping pass; every input predicted exactly once."""
        self._check_fitted()
        model = self.backbone_.model_
        data = tokenize_dataset(as_examples(X), self.backbone_.vocab_, model.cfg.max_seq_len)
        rows, keep = partition_round(len(data), self.n_inputs, np.random.default_rng(self.seed))
        out = np.zeros(len(data), dtype=np.int64)
        was_training = model.training
        model.eval_mode()
        try:
            for start in range(0, rows.shape[0], 32):
                chunk, kept = rows[start : start + 32], keep[start : start + 32]
                batch = build_composite_batch(data, chunk, self.prefill_layers_)
                with no_grad():
                    logits, _ = revmux_forward(batch, model, self.adapters_)
                for k, lg in enumerate(logits):
                    pred = np.argmax(lg.data, axis=-1)
                    out[chunk[kept[:, k], k]] = pred[kept[:, k]]
        finally:
            model.train_mode(was_training)
        return self.classes_[out]

    def eval_report(self, X, y, rounds: int | None = None):
        """Multi-round accuracy report on labeled text."""
        self._check_fitted()
        y = check_labels(y)
        index_of = {c: i for i, c in enumerate(self.classes_)}
        encoded = np.array([index_of[v] for v in y], dtype=np.int64)
        model = self.backbone_.model_
        data = tokenize_dataset(as_examples(X, encoded), self.backbone_.vocab_, model.cfg.max_seq_len)
        return evaluate_rounds(
            model, self.adapters_, data, self.n_inputs, self.prefill_layers_,
            rounds=self.rounds if rounds is None else rounds,
            seed=self.seed, infonce_weight=self.infonce_weight,
        )
