"""Desk-scale transformer encoder with a layer-split forward.

The forward can stop after the first ``l`` blocks (per-instance prefilling)
and resume from block ``l+1`` on a mixed representation. Pre-norm blocks,
learned positional embeddings, GELU feed-forward, masked mean pooling into a
linear classifier head (CLS pooling available via config).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointFormatError, load_arrays, save_arrays
from .layers import ACTIVATIONS, LayerNorm, Linear
from .tensor import Tensor


class ConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    vocab_size: int = 128
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    ffn_dim: int = 128
    max_seq_len: int = 16
    n_classes: int = 2
    dropout_rate: float = 0.1
    pooling: str = "mean"  # "mean" | "cls"
    activation: str = "gelu"

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_layers < 1:
            raise ConfigError("need at least one encoder layer")
        if self.pooling not in ("mean", "cls"):
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    def check_divisible(self, n: int) -> None:
        if self.d_model % n != 0:
            raise ConfigError(f"d_model {self.d_model} not divisible by multiplex width {n}")

    def to_vector(self) -> np.ndarray:
        return np.array(
            [
                self.vocab_size,
                self.d_model,
                self.n_heads,
                self.n_layers,
                self.ffn_dim,
                self.max_seq_len,
                self.n_classes,
                self.dropout_rate,
                0.0 if self.pooling == "mean" else 1.0,
                0.0 if self.activation == "gelu" else 1.0,
            ],
            dtype=np.float32,
        )

    @classmethod
    def from_vector(cls, v: np.ndarray) -> "EncoderConfig":
        return cls(
            vocab_size=int(v[0]),
            d_model=int(v[1]),
            n_heads=int(v[2]),
            n_layers=int(v[3]),
            ffn_dim=int(v[4]),
            max_seq_len=int(v[5]),
            n_classes=int(v[6]),
            dropout_rate=float(v[7]),
            pooling="mean" if v[8] == 0.0 else "cls",
            activation="gelu" if v[9] == 0.0 else "relu",
        )


class MultiHeadSelfAttention:
    def __init__(self, d_model: int, n_heads: int, rng, dtype):
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.wq = Linear(d_model, d_model, rng, dtype)
        self.wk = Linear(d_model, d_model, rng, dtype)
        self.wv = Linear(d_model, d_model, rng, dtype)
        self.wo = Linear(d_model, d_model, rng, dtype)

    def __call__(self, x: Tensor, mask: np.ndarray, return_probs: bool = False):
        b, t, d = x.shape
        h, hd = self.n_heads, self.head_dim

        def heads(lin):
            return T.swap_axes(T.reshape(lin(x), (b, t, h, hd)), 1, 2)  # [B,H,T,hd]

        q, k, v = heads(self.wq), heads(self.wk), heads(self.wv)
        scores = T.scale(T.matmul(q, T.swap_axes(k, 2, 3)), 1.0 / np.sqrt(hd))
        # masked key positions get a large negative bias; fully masked rows
        # degrade to uniform attention and stay finite
        bias = ((1.0 - mask.astype(x.dtype))[:, None, None, :] * -1e9).astype(x.dtype)
        probs = T.softmax_last(T.add(scores, Tensor(bias)))
        ctx = T.reshape(T.swap_axes(T.matmul(probs, v), 1, 2), (b, t, d))
        out = self.wo(ctx)
        if return_probs:
            return out, probs
        return out

    def named_parameters(self, prefix=""):
        params = {}
        for name, lin in (("wq", self.wq), ("wk", self.wk), ("wv", self.wv), ("wo", self.wo)):
            params.update(lin.named_parameters(f"{prefix}{name}."))
        return params


class EncoderBlock:
    def __init__(self, cfg: EncoderConfig, rng, dtype):
        self.ln1 = LayerNorm(cfg.d_model, dtype)
        self.attn = MultiHeadSelfAttention(cfg.d_model, cfg.n_heads, rng, dtype)
        self.ln2 = LayerNorm(cfg.d_model, dtype)
        self.ffn_in = Linear(cfg.d_model, cfg.ffn_dim, rng, dtype)
        self.ffn_out = Linear(cfg.ffn_dim, cfg.d_model, rng, dtype)
        self.act = ACTIVATIONS[cfg.activation]

    def __call__(self, x: Tensor, mask: np.ndarray, drop) -> Tensor:
        x = T.add(x, drop(self.attn(self.ln1(x), mask)))
        x = T.add(x, drop(self.ffn_out(self.act(self.ffn_in(self.ln2(x))))))
        return x

    def named_parameters(self, prefix=""):
        params = {}
        params.update(self.ln1.named_parameters(f"{prefix}ln1."))
        params.update(self.attn.named_parameters(f"{prefix}attn."))
        params.update(self.ln2.named_parameters(f"{prefix}ln2."))
        params.update(self.ffn_in.named_parameters(f"{prefix}ffn_in."))
        params.update(self.ffn_out.named_parameters(f"{prefix}ffn_out."))
        return params


class EncoderModel:
    """Token classifier encoder; splittable at any block boundary."""

    def __init__(self, cfg: EncoderConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = np.dtype(dtype).type
        rng = np.random.default_rng(seed)
        d = cfg.d_model
        self.token_emb = Tensor(rng.normal(0.0, 0.02, (cfg.vocab_size, d)).astype(dtype), requires_grad=True)
        self.pos_emb = Tensor(rng.normal(0.0, 0.02, (cfg.max_seq_len, d)).astype(dtype), requires_grad=True)
        self.blocks = [EncoderBlock(cfg, rng, dtype) for _ in range(cfg.n_layers)]
        self.final_ln = LayerNorm(d, dtype)
        self.head = Linear(d, cfg.n_classes, rng, dtype)
        self.training = False
        self._drop_rng = np.random.default_rng(seed + 1)
        self.frozen = False

    # -- mode / parameter control ------------------------------------------

    def train_mode(self, flag: bool = True) -> None:
        self.training = flag

    def eval_mode(self) -> None:
        self.training = False

    def set_frozen(self, flag: bool) -> None:
        self.frozen = flag
        for p in self.named_parameters().values():
            p.requires_grad = not flag

    def named_parameters(self) -> dict[str, Tensor]:
        params = {"token_emb": self.token_emb, "pos_emb": self.pos_emb}
        for i, blk in enumerate(self.blocks):
            params.update(blk.named_parameters(f"block{i}."))
        params.update(self.final_ln.named_parameters("final_ln."))
        params.update(self.head.named_parameters("head."))
        return params

    def _drop(self, x: Tensor) -> Tensor:
        if self.training and self.cfg.dropout_rate > 0.0:
            return T.dropout(x, self.cfg.dropout_rate, self._drop_rng)
        return x

    # -- forward -------------------------------------------------------------

    def _check_split(self, l: int) -> None:
        if not 0 <= l <= self.cfg.n_layers:
            raise ConfigError(f"split point l={l} outside [0, {self.cfg.n_layers}]")

    def embed(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens)
        t = tokens.shape[1]
        if t > self.cfg.max_seq_len:
            raise ConfigError(f"sequence length {t} exceeds max_seq_len {self.cfg.max_seq_len}")
        tok = T.embedding(self.token_emb, tokens)
        pos = T.embedding(self.pos_emb, np.arange(t)[None, :])
        return self._drop(T.add(tok, pos))

    def forward_prefix(self, tokens: np.ndarray, mask: np.ndarray, l: int) -> Tensor:
        self._check_split(l)
        h = self.embed(tokens)
        for blk in self.blocks[:l]:
            h = blk(h, mask, self._drop)
        return h

    def forward_suffix(self, h: Tensor, mask: np.ndarray, l: int) -> Tensor:
        self._check_split(l)
        if h.shape[-1] != self.cfg.d_model:
            raise ConfigError(f"hidden width {h.shape[-1]} != d_model {self.cfg.d_model}")
        for blk in self.blocks[l:]:
            h = blk(h, mask, self._drop)
        return self.final_ln(h)

    def forward_full(self, tokens: np.ndarray, mask: np.ndarray) -> Tensor:
        return self.forward_suffix(self.forward_prefix(tokens, mask, 0), mask, 0)

    def pool(self, h: Tensor, mask: np.ndarray) -> Tensor:
        mask = np.asarray(mask)
        counts = mask.sum(axis=1)
        if (counts == 0).any():
            raise ValueError("cannot pool a fully masked sequence")
        if self.cfg.pooling == "cls":
            return T.sum_over_axis(T.mul(h, Tensor(_cls_selector(mask, h.dtype))), 1)
        m = Tensor(mask.astype(h.dtype)[:, :, None])
        summed = T.sum_over_axis(T.mul(h, m), 1)
        return T.div(summed, Tensor(counts.astype(h.dtype)[:, None]))

    def pool_and_classify(self, h: Tensor, mask: np.ndarray) -> Tensor:
        return self.head(self.pool(h, mask))

    def classify(self, pooled: Tensor) -> Tensor:
        return self.head(pooled)

    # -- persistence -----------------------------------------------------------

    def save(self, path: str) -> None:
        arrays = {name: p.data for name, p in self.named_parameters().items()}
        arrays["meta.encoder_config"] = self.cfg.to_vector()
        save_arrays(path, arrays)

    @classmethod
    def load(cls, path: str, dtype=np.float32) -> "EncoderModel":
        arrays = load_arrays(path)
        if "meta.encoder_config" not in arrays:
            raise CheckpointFormatError(f"{path}: missing encoder config entry")
        model = cls(EncoderConfig.from_vector(arrays["meta.encoder_config"]), dtype=dtype)
        model.load_state(arrays)
        return model

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters().items():
            if name not in arrays:
                raise CheckpointFormatError(f"checkpoint missing entry {name!r}")
            if arrays[name].shape != p.shape:
                raise CheckpointFormatError(
                    f"entry {name!r} has shape {arrays[name].shape}, expected {p.shape}"
                )
            p.data = arrays[name].astype(p.data.dtype)


def _cls_selector(mask: np.ndarray, dtype) -> np.ndarray:
    sel = np.zeros(mask.shape, dtype=dtype)
    sel[:, 0] = 1.0
    return sel[:, :, None]
