"""Reversible multiplexing adapters.

The trainable bundle around a frozen encoder: a shared down projection
(d -> d/N), an N-way additive coupling chain whose exact inverse reuses the
same coupling MLPs, and a shared up projection (d/N -> d). With the coupling
MLPs zero-initialized the multiplexer starts as a pure concatenation, so
training begins from an exactly invertible identity mix.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .backbone import ConfigError
from .checkpoint import CheckpointFormatError, load_arrays, save_arrays
from .layers import ACTIVATIONS, Linear
from .tensor import Tensor


class CouplingMLP:
    """Two affine layers (width -> hidden -> width) with a nonlinearity.

    ``init="zero"`` zeroes the second layer so the map starts as the zero
    function; ``init="random"`` draws both layers fan-in uniform.
    """

    def __init__(self, width: int, hidden: int, rng, dtype=np.float32, activation: str = "gelu", init: str = "zero"):
        if init not in ("zero", "random"):
            raise ValueError(f"unknown coupling init {init!r}")
        self.lin1 = Linear(width, hidden, rng, dtype)
        self.lin2 = Linear(hidden, width, rng, dtype, zero_init=(init == "zero"))
        self.act = ACTIVATIONS[activation]

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(self.act(self.lin1(x)))

    def named_parameters(self, prefix=""):
        params = {}
        params.update(self.lin1.named_parameters(f"{prefix}lin1."))
        params.update(self.lin2.named_parameters(f"{prefix}lin2."))
        return params


class RevMuxAdapters:
    """Down projection, N coupling MLPs, and up projection.

    The same coupling objects serve the multiplexer and the demultiplexer, so
    the unmix is exact by construction for any parameter values.
    """

    def __init__(
        self,
        d_model: int,
        n_inputs: int,
        hidden: int | None = None,
        seed: int = 0,
        dtype=np.float32,
        activation: str = "gelu",
        coupling_init: str = "zero",
    ):
        if n_inputs < 2:
            raise ConfigError(f"multiplex width must be >= 2, got {n_inputs}")
        if d_model % n_inputs != 0:
            raise ConfigError(f"d_model {d_model} not divisible by multiplex width {n_inputs}")
        self.d_model = d_model
        self.n = n_inputs
        self.slot_dim = d_model // n_inputs
        self.hidden = hidden if hidden is not None else self.slot_dim
        self.activation = activation
        rng = np.random.default_rng(seed)
        self.f_down = Linear(d_model, self.slot_dim, rng, dtype)
        self.f_up = Linear(self.slot_dim, d_model, rng, dtype)
        self.couplings = [
            CouplingMLP(self.slot_dim, self.hidden, rng, dtype, activation, coupling_init)
            for _ in range(n_inputs)
        ]

    # -- projections -----------------------------------------------------------

    def down_project(self, h: Tensor) -> Tensor:
        if h.shape[-1] != self.d_model:
            raise ConfigError(f"down_project expects last dim {self.d_model}, got {h.shape[-1]}")
        return self.f_down(h)

    def up_project(self, i: Tensor) -> Tensor:
        if i.shape[-1] != self.slot_dim:
            raise ConfigError(f"up_project expects last dim {self.slot_dim}, got {i.shape[-1]}")
        return self.f_up(i)

    # -- coupling chain ----------------------------------------------------------

    def _check_slots(self, slots) -> None:
        if len(slots) != self.n:
            raise ConfigError(f"expected {self.n} slot tensors, got {len(slots)}")
        for s in slots:
            if s.shape != slots[0].shape:
                raise ConfigError("slot tensors must share a shape")
            if s.shape[-1] != self.slot_dim:
                raise ConfigError(f"slot width must be {self.slot_dim}, got {s.shape[-1]}")

    def multiplex(self, slots: list[Tensor]) -> Tensor:
        """o_1 = i_1 + F_1(i_N); o_k = i_k + F_k(o_{k-1}); concat."""
        self._check_slots(slots)
        outs = [T.add(slots[0], self.couplings[0](slots[-1]))]
        for k in range(1, self.n):
            outs.append(T.add(slots[k], self.couplings[k](outs[k - 1])))
        return T.concat_last_dim(outs)

    def demultiplex(self, mixed: Tensor) -> list[Tensor]:
        """Exact inverse: peel the chain backwards with the same couplings."""
        if mixed.shape[-1] != self.d_model:
            raise ConfigError(f"demultiplex expects last dim {self.d_model}, got {mixed.shape[-1]}")
        o = T.split_last_dim(mixed, self.n)
        rec: list[Tensor | None] = [None] * self.n
        for k in range(self.n - 1, 0, -1):
            rec[k] = T.sub(o[k], self.couplings[k](o[k - 1]))
        rec[0] = T.sub(o[0], self.couplings[0](rec[-1]))
        return rec

    def multiplex_pair(self, i1: Tensor, i2: Tensor) -> Tensor:
        """The two-slot form written out explicitly (same parameters)."""
        if self.n != 2:
            raise ConfigError("pair form only defined for a 2-way adapter")
        f, g = self.couplings
        o1 = T.add(i1, f(i2))
        o2 = T.add(i2, g(o1))
        return T.concat_last_dim([o1, o2])

    def demultiplex_pair(self, mixed: Tensor) -> list[Tensor]:
        if self.n != 2:
            raise ConfigError("pair form only defined for a 2-way adapter")
        f, g = self.couplings
        o1, o2 = T.split_last_dim(mixed, 2)
        i2 = T.sub(o2, g(o1))
        i1 = T.sub(o1, f(i2))
        return [i1, i2]

    # -- parameters / persistence ------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        params = {}
        params.update(self.f_down.named_parameters("adapter.f_down."))
        params.update(self.f_up.named_parameters("adapter.f_up."))
        for k, c in enumerate(self.couplings):
            params.update(c.named_parameters(f"adapter.coupling{k}."))
        return params

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {name: p for name, p in self.named_parameters().items() if p.requires_grad}

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.named_parameters().values())

    def save(self, path: str) -> None:
        arrays = {name: p.data for name, p in self.named_parameters().items()}
        arrays["meta.adapter_config"] = np.array(
            [self.d_model, self.n, self.hidden, 0.0 if self.activation == "gelu" else 1.0],
            dtype=np.float32,
        )
        save_arrays(path, arrays)

    @classmethod
    def load(cls, path: str, dtype=np.float32) -> "RevMuxAdapters":
        arrays = load_arrays(path)
        if "meta.adapter_config" not in arrays:
            raise CheckpointFormatError(f"{path}: missing adapter config entry")
        d, n, hidden, act = arrays["meta.adapter_config"]
        adapters = cls(int(d), int(n), hidden=int(hidden), dtype=dtype, activation="gelu" if act == 0.0 else "relu")
        for name, p in adapters.named_parameters().items():
            if name not in arrays:
                raise CheckpointFormatError(f"checkpoint missing entry {name!r}")
            p.data = arrays[name].astype(p.data.dtype)
        return adapters
