"""Dataset ingestion, whitespace tokenization, and synthetic desk-scale tasks."""

from __future__ import annotations

import json
import os
from collections import Counter
from dataclasses import dataclass

import numpy as np

PAD_ID = 0
UNK_ID = 1
SEP_ID = 2
CLS_ID = 3
RESERVED = ("[PAD]", "[UNK]", "[SEP]", "[CLS]")


class DataError(ValueError):
    """Malformed input data, reported with its source location when known."""


@dataclass(frozen=True)
class Example:
    text_a: str
    text_b: str | None = None
    label: int = 0

    def __post_init__(self):
        if not self.text_a:
            raise DataError("text_a must be nonempty")
        if self.label < 0:
            raise DataError(f"label must be nonnegative, got {self.label}")


class Vocab:
    """Token-to-id map with fixed reserved ids and stable ordering."""

    def __init__(self, tokens: list[str]):
        self.token_to_id: dict[str, int] = {}
        self.id_to_token: list[str] = list(RESERVED)
        for tok in tokens:
            if tok in RESERVED:
                raise DataError(f"token {tok!r} collides with a reserved entry")
            if tok in self.token_to_id:
                raise DataError(f"duplicate token {tok!r}")
            self.token_to_id[tok] = len(self.id_to_token)
            self.id_to_token.append(tok)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def decode(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.id_to_token):
            raise DataError(f"token id {token_id} out of range")
        return self.id_to_token[token_id]

    @classmethod
    def build(cls, texts: list[str], max_size: int = 128, min_count: int = 1) -> "Vocab":
        """Most frequent tokens first; ties broken alphabetically for stability."""
        counts = Counter(tok for text in texts for tok in text.split())
        kept = [t for t, c in counts.items() if c >= min_count]
        kept.sort(key=lambda t: (-counts[t], t))
        return cls(kept[: max_size - len(RESERVED)])

    def save(self, path: str) -> None:
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            for tok in self.id_to_token[len(RESERVED):]:
                fh.write(tok + "\n")
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh if line.rstrip("\n")])


def load_jsonl(path: str, n_classes: int | None = None) -> list[Example]:
    """Read one JSON object per line; text/label or text1/text2/label fields."""
    examples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            if "text" in obj:
                text_a, text_b = obj["text"], None
            elif "text1" in obj and "text2" in obj:
                text_a, text_b = obj["text1"], obj["text2"]
            else:
                raise DataError(f"{path}:{lineno}: need 'text' or 'text1'/'text2' fields")
            if "label" not in obj:
                raise DataError(f"{path}:{lineno}: missing 'label'")
            label = obj["label"]
            if not isinstance(label, int) or isinstance(label, bool):
                raise DataError(f"{path}:{lineno}: label must be an integer, got {label!r}")
            if label < 0 or (n_classes is not None and label >= n_classes):
                raise DataError(f"{path}:{lineno}: label {label} out of range")
            try:
                examples.append(Example(text_a=text_a, text_b=text_b, label=label))
            except DataError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return examples


def save_jsonl(examples: list[Example], path: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for ex in examples:
            if ex.text_b is None:
                obj = {"text": ex.text_a, "label": ex.label}
            else:
                obj = {"text1": ex.text_a, "text2": ex.text_b, "label": ex.label}
            fh.write(json.dumps(obj) + "\n")
    os.replace(tmp, path)


def tokenize(ex: Example, vocab: Vocab, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """[CLS] a-tokens ([SEP] b-tokens), truncated to max_len, then padded."""
    ids = [CLS_ID] + [vocab.encode(t) for t in ex.text_a.split()]
    if ex.text_b is not None:
        ids += [SEP_ID] + [vocab.encode(t) for t in ex.text_b.split()]
    ids = ids[:max_len]
    tokens = np.full(max_len, PAD_ID, dtype=np.int32)
    tokens[: len(ids)] = ids
    mask = np.zeros(max_len, dtype=np.float32)
    mask[: len(ids)] = 1.0
    return tokens, mask


def detokenize(tokens: np.ndarray, vocab: Vocab) -> str:
    """Inverse map over non-pad positions; special ids keep their markers."""
    return " ".join(vocab.decode(int(t)) for t in tokens if int(t) != PAD_ID)


@dataclass
class ArrayDataset:
    """Column arrays for a tokenized split."""

    tokens: np.ndarray  # [M, T] int32
    masks: np.ndarray  # [M, T] float32
    labels: np.ndarray  # [M] int64

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def take(self, idx) -> "ArrayDataset":
        return ArrayDataset(self.tokens[idx], self.masks[idx], self.labels[idx])


def tokenize_dataset(examples: list[Example], vocab: Vocab, max_len: int) -> ArrayDataset:
    tokens = np.zeros((len(examples), max_len), dtype=np.int32)
    masks = np.zeros((len(examples), max_len), dtype=np.float32)
    labels = np.zeros(len(examples), dtype=np.int64)
    for i, ex in enumerate(examples):
        tokens[i], masks[i] = tokenize(ex, vocab, max_len)
        labels[i] = ex.label
    return ArrayDataset(tokens, masks, labels)


# -- synthetic tasks ----------------------------------------------------------

POSITIVE_MARKERS = ("good", "great", "fine", "happy", "nice")
NEGATIVE_MARKERS = ("bad", "awful", "poor", "sad", "gross")
FILLER_WORDS = tuple(f"w{i:02d}" for i in range(40))
CONTENT_WORDS = tuple(f"c{i:02d}" for i in range(30))
PAIR_MATCH_THRESHOLD = 2


def keyword_label(text: str) -> int:
    toks = text.split()
    pos = sum(t in POSITIVE_MARKERS for t in toks)
    neg = sum(t in NEGATIVE_MARKERS for t in toks)
    return int(pos > neg)


def pair_match_label(text_a: str, text_b: str) -> int:
    shared = set(text_a.split()) & set(text_b.split()) & set(CONTENT_WORDS)
    return int(len(shared) >= PAIR_MATCH_THRESHOLD)


def _gen_keyword(rng) -> Example:
    length = int(rng.integers(6, 13))
    words = list(rng.choice(FILLER_WORDS, size=length))
    n_pos = int(rng.integers(0, 4))
    n_neg = int(rng.integers(0, 4))
    words += list(rng.choice(POSITIVE_MARKERS, size=n_pos))
    words += list(rng.choice(NEGATIVE_MARKERS, size=n_neg))
    rng.shuffle(words)
    text = " ".join(words)
    return Example(text_a=text, label=keyword_label(text))


def _gen_pair(rng) -> Example:
    n_shared = int(rng.integers(0, 5))
    shared = list(rng.choice(CONTENT_WORDS, size=n_shared, replace=False))
    a = shared + list(rng.choice(FILLER_WORDS, size=int(rng.integers(3, 7))))
    b = list(shared) + list(rng.choice(FILLER_WORDS, size=int(rng.integers(3, 7))))
    rng.shuffle(a)
    rng.shuffle(b)
    text_a, text_b = " ".join(a), " ".join(b)
    return Example(text_a=text_a, text_b=text_b, label=pair_match_label(text_a, text_b))


def _balanced(gen, rng, count: int) -> list[Example]:
    """Rejection-sample until each class holds exactly half (odd leftover to 0)."""
    quota = {1: count // 2, 0: count - count // 2}
    out = []
    while quota[0] > 0 or quota[1] > 0:
        ex = gen(rng)
        if quota[ex.label] > 0:
            quota[ex.label] -= 1
            out.append(ex)
    order = rng.permutation(len(out))
    return [out[i] for i in order]


def synth_task(kind: str, n_train: int, n_eval: int, seed: int) -> tuple[list[Example], list[Example]]:
    """Generate a reproducible, class-balanced train/eval pair."""
    generators = {"keyword": _gen_keyword, "pairmatch": _gen_pair}
    if kind not in generators:
        raise DataError(f"unknown synthetic task {kind!r} (choose from {sorted(generators)})")
    rng = np.random.default_rng(seed)
    train = _balanced(generators[kind], rng, n_train)
    evaluation = _balanced(generators[kind], rng, n_eval)
    return train, evaluation


def task_vocab(kind: str) -> Vocab:
    """The full closed vocabulary a synthetic task can emit."""
    if kind == "keyword":
        words = list(FILLER_WORDS) + list(POSITIVE_MARKERS) + list(NEGATIVE_MARKERS)
    elif kind == "pairmatch":
        words = list(FILLER_WORDS) + list(CONTENT_WORDS)
    else:
        raise DataError(f"unknown synthetic task {kind!r}")
    return Vocab(sorted(words))
