"""Randomized multi-round evaluation and the analytical FLOPs accountant.

Grouping order changes multiplexed predictions, so accuracy is measured as
the mean over t independently seeded grouping rounds. FLOPs are counted
analytically from the documented cost model, never measured.
"""

from __future__ import annotations

import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .adapters import RevMuxAdapters
from .backbone import ConfigError, EncoderConfig, EncoderModel
from .data import ArrayDataset
from .pipeline import build_composite_batch, revmux_forward
from .tensor import no_grad


# -- multi-round protocol ------------------------------------------------------

@dataclass
class EvalReport:
    rounds: list[float]
    mean: float
    std: float
    per_dataset: dict[str, dict]
    n_inputs: int
    prefill_layers: int
    infonce_weight: float | None
    seed: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            fh.write(self.to_json() + "\n")
        os.replace(tmp, path)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def partition_round(count: int, n: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """One round's grouping: shuffle, stride into n subsets, zip into groups.

    Returns index rows [G, n] and a keep mask; short subsets are padded by
    repeating their first sample, and padded cells are marked discard so each
    sample is scored exactly once.
    """
    if count < n:
        raise ConfigError(f"evaluation set of {count} cannot fill a group of {n}")
    perm = rng.permutation(count)
    subsets = [perm[j::n] for j in range(n)]
    n_groups = len(subsets[0])
    rows = np.zeros((n_groups, n), dtype=np.int64)
    keep = np.zeros((n_groups, n), dtype=bool)
    for j, sub in enumerate(subsets):
        rows[: len(sub), j] = sub
        keep[: len(sub), j] = True
        if len(sub) < n_groups:
            rows[len(sub):, j] = sub[0]
    return rows, keep


def _round_counts(
    model: EncoderModel,
    adapters: RevMuxAdapters | None,
    data: ArrayDataset,
    n: int,
    prefill_layers: int,
    rng,
    batch_groups: int,
) -> tuple[int, int]:
    """(correct, scored) over one grouping round."""
    rows, keep = partition_round(len(data), n, rng)
    correct = scored = 0
    for start in range(0, rows.shape[0], batch_groups):
        chunk = rows[start : start + batch_groups]
        kept = keep[start : start + batch_groups]
        batch = build_composite_batch(data, chunk, prefill_layers)
        with no_grad():
            logits, _ = revmux_forward(batch, model, adapters)
        for k, lg in enumerate(logits):
            hits = np.argmax(lg.data, axis=-1) == batch.labels[k]
            correct += int(np.sum(hits[kept[:, k]]))
            scored += int(np.sum(kept[:, k]))
    return correct, scored


def evaluate_rounds(
    model: EncoderModel,
    adapters: RevMuxAdapters | None,
    datasets: ArrayDataset | dict[str, ArrayDataset],
    n_inputs: int,
    prefill_layers: int,
    rounds: int = 10,
    seed: int = 0,
    infonce_weight: float | None = None,
    batch_groups: int = 32,
) -> EvalReport:
    """Accuracy over ``rounds`` independently seeded grouping passes.

    Honors RVMX_THREADS for a worker pool over (round, dataset) cells; the
    reduction sorts by round index, so the report is thread-count invariant.
    """
    if rounds < 1:
        raise ConfigError(f"rounds must be >= 1, got {rounds}")
    if isinstance(datasets, ArrayDataset):
        datasets = {"eval": datasets}
    names = sorted(datasets)
    round_seeds = np.random.SeedSequence(seed).spawn(rounds)
    was_training = model.training
    model.eval_mode()

    def run_cell(r: int, i: int) -> tuple[int, int]:
        rng = np.random.default_rng(round_seeds[r].spawn(len(names))[i])
        return _round_counts(
            model, adapters, datasets[names[i]], n_inputs, prefill_layers, rng, batch_groups
        )

    cells = [(r, i) for r in range(rounds) for i in range(len(names))]
    try:
        workers = int(os.environ.get("RVMX_THREADS", "1"))
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(lambda c: run_cell(*c), cells))
        else:
            results = [run_cell(*c) for c in cells]
    finally:
        model.train_mode(was_training)

    by_cell = dict(zip(cells, results))
    per_dataset: dict[str, dict] = {}
    overall: list[float] = []
    for r in range(rounds):
        correct = scored = 0
        for i in range(len(names)):
            c, s = by_cell[(r, i)]
            correct += c
            scored += s
        overall.append(correct / scored)
    for i, name in enumerate(names):
        accs = [by_cell[(r, i)][0] / by_cell[(r, i)][1] for r in range(rounds)]
        per_dataset[name] = {
            "rounds": accs,
            "mean": float(np.mean(accs)),
            "std": float(np.std(accs)),
        }
    return EvalReport(
        rounds=overall,
        mean=float(np.mean(overall)),
        std=float(np.std(overall)),
        per_dataset=per_dataset,
        n_inputs=n_inputs,
        prefill_layers=prefill_layers,
        infonce_weight=infonce_weight,
        seed=seed,
    )


def accuracy_cdf(round_accuracies: list[float]) -> np.ndarray:
    """Empirical CDF of round accuracies: rows of (accuracy, cum fraction)."""
    if len(round_accuracies) == 0:
        raise ConfigError("need at least one round accuracy")
    accs = np.sort(np.asarray(round_accuracies, dtype=np.float64))
    fractions = np.arange(1, len(accs) + 1) / len(accs)
    return np.column_stack([accs, fractions])


def save_cdf_csv(cdf: np.ndarray, path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write("accuracy,cumulative_fraction\n")
        for acc, frac in cdf:
            fh.write(f"{float(acc)!r},{float(frac)!r}\n")
    os.replace(tmp, path)


# -- analytical FLOPs ---------------------------------------------------------
#
# Cost model: a matmul [m,k]@[k,n] costs 2*m*k*n; a linear layer adds one
# flop per output element for its bias; every elementwise op (residual add,
# mask add, score scaling, activations) costs one flop per element; softmax
# is 5 per element (max, subtract, exp, sum, divide); layernorm is 8 per
# element; masked mean pooling is 2 per element plus one divide per feature.

LAYERNORM_FLOPS_PER_ELEMENT = 8
SOFTMAX_FLOPS_PER_ELEMENT = 5


def _linear_flops(rows: int, d_in: int, d_out: int) -> int:
    return 2 * rows * d_in * d_out + rows * d_out


def _block_flops(seq_len: int, cfg: EncoderConfig) -> int:
    t, d, h, f = seq_len, cfg.d_model, cfg.n_heads, cfg.ffn_dim
    total = 2 * LAYERNORM_FLOPS_PER_ELEMENT * t * d
    total += 4 * _linear_flops(t, d, d)  # query, key, value, output projections
    total += 2 * t * t * d  # attention scores
    total += h * t * t  # score scaling
    total += h * t * t  # mask bias add
    total += SOFTMAX_FLOPS_PER_ELEMENT * h * t * t
    total += 2 * t * t * d  # context aggregation
    total += 2 * t * d  # residual adds
    total += _linear_flops(t, d, f) + t * f + _linear_flops(t, f, d)  # ffn + act
    return total


def _embed_flops(seq_len: int, cfg: EncoderConfig) -> int:
    return seq_len * cfg.d_model  # position add; table lookups are free


def _pool_head_flops(seq_len: int, cfg: EncoderConfig) -> int:
    pool = 2 * seq_len * cfg.d_model + cfg.d_model
    return pool + _linear_flops(1, cfg.d_model, cfg.n_classes)


def _coupling_flops(seq_len: int, slot: int, hidden: int) -> int:
    return _linear_flops(seq_len, slot, hidden) + seq_len * hidden + _linear_flops(seq_len, hidden, slot)


def _adapter_flops(seq_len: int, cfg: EncoderConfig, n: int, hidden: int) -> int:
    slot = cfg.d_model // n
    total = n * _linear_flops(seq_len, cfg.d_model, slot)  # down projections
    total += 2 * n * _coupling_flops(seq_len, slot, hidden)  # mix and unmix chains
    total += 2 * n * seq_len * slot  # coupling add (mix) and subtract (unmix)
    total += n * _linear_flops(seq_len, slot, cfg.d_model)  # up projections
    return total


@dataclass
class FlopsReport:
    n_inputs: int
    prefill_layers: int
    batch: int
    seq_len: int
    flops_single: int  # one instance, full forward
    flops_composite: int  # one group of n_inputs
    speedup_percent: float
    components: dict[str, int] = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "w") as fh:
            fh.write(self.to_json() + "\n")
        os.replace(tmp, path)

    @classmethod
    def from_json(cls, text: str) -> "FlopsReport":
        return cls(**json.loads(text))


def count_flops(
    cfg: EncoderConfig,
    adapters: RevMuxAdapters | None,
    n_inputs: int,
    prefill_layers: int,
    batch: int = 32,
    seq_len: int = 128,
) -> FlopsReport:
    """Analytical cost of one composite group versus n_inputs single passes.

    ``adapters`` supplies the coupling hidden width; pass None to assume the
    default (one slot width). n_inputs=1 means no adapters and no mixing.
    """
    if not 0 <= prefill_layers <= cfg.n_layers:
        raise ConfigError(f"prefill depth {prefill_layers} outside [0, {cfg.n_layers}]")
    if n_inputs < 1:
        raise ConfigError(f"n_inputs must be >= 1, got {n_inputs}")
    if n_inputs > 1:
        cfg.check_divisible(n_inputs)
        if adapters is not None and adapters.n != n_inputs:
            raise ConfigError(f"adapters expect {adapters.n} slots, asked for {n_inputs}")
    hidden = adapters.hidden if adapters is not None else cfg.d_model // max(n_inputs, 1)

    block = _block_flops(seq_len, cfg)
    final_ln = LAYERNORM_FLOPS_PER_ELEMENT * seq_len * cfg.d_model
    single = _embed_flops(seq_len, cfg) + cfg.n_layers * block + final_ln + _pool_head_flops(seq_len, cfg)

    if n_inputs == 1:
        components = {
            "embeddings": _embed_flops(seq_len, cfg),
            "prefix_layers": 0,
            "suffix_layers": cfg.n_layers * block + final_ln,
            "adapters": 0,
            "pool_and_head": _pool_head_flops(seq_len, cfg),
        }
    else:
        components = {
            "embeddings": n_inputs * _embed_flops(seq_len, cfg),
            "prefix_layers": n_inputs * prefill_layers * block,
            "suffix_layers": (cfg.n_layers - prefill_layers) * block + final_ln,
            "adapters": _adapter_flops(seq_len, cfg, n_inputs, hidden),
            "pool_and_head": n_inputs * _pool_head_flops(seq_len, cfg),
        }
    composite = sum(components.values())
    return FlopsReport(
        n_inputs=n_inputs,
        prefill_layers=prefill_layers,
        batch=batch,
        seq_len=seq_len,
        flops_single=single,
        flops_composite=composite,
        speedup_percent=100.0 * n_inputs * single / composite,
        components=components,
    )
