"""Command line surface: pretrain, train-adapters, eval, flops, and sweep.

Configuration is an INI file (``key = value`` under [model], [train],
[eval], [data]) validated against a fixed schema; unknown sections or keys
are rejected. Command line flags override config values. Exit codes: 0
success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import os
import sys
from dataclasses import dataclass, field

from .adapters import RevMuxAdapters
from .backbone import ConfigError, EncoderConfig, EncoderModel
from .checkpoint import CheckpointFormatError
from .data import (
    DataError,
    Vocab,
    load_jsonl,
    save_jsonl,
    synth_task,
    task_vocab,
    tokenize_dataset,
)
from .evaluation import accuracy_cdf, count_flops, evaluate_rounds, save_cdf_csv
from .pipeline import (
    PretrainConfig,
    TrainConfig,
    TrainingDiverged,
    plain_accuracy,
    train_adapters,
    train_backbone,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class ConvergenceError(RuntimeError):
    """Training finished below the configured accuracy floor."""


def _opt_int(text: str) -> int | None:
    return int(text) if text.strip() else None


def _opt_str(text: str) -> str | None:
    return text.strip() or None


CONFIG_SCHEMA = {
    "model": {
        "vocab_size": int,
        "d_model": int,
        "n_heads": int,
        "n_layers": int,
        "ffn_dim": int,
        "max_seq_len": int,
        "n_classes": int,
        "dropout_rate": float,
        "pooling": str,
        "activation": str,
    },
    "train": {
        "lr": float,
        "backbone_lr": float,
        "epochs": int,
        "batch_size": int,
        "groups_per_batch": int,
        "weight_decay": float,
        "patience": int,
        "n": int,
        "prefill_l": int,
        "lambda": float,
        "mode": str,
        "seed": int,
        "accuracy_floor": float,
        "coupling_hidden": _opt_int,
    },
    "eval": {
        "rounds": int,
        "seed": int,
        "batch_groups": int,
    },
    "data": {
        "task": str,
        "n_train": int,
        "n_eval": int,
        "seed": int,
        "train_path": _opt_str,
        "eval_path": _opt_str,
    },
}

CONFIG_DEFAULTS = {
    "model": {
        "vocab_size": 128, "d_model": 64, "n_heads": 4, "n_layers": 4,
        "ffn_dim": 128, "max_seq_len": 16, "n_classes": 2,
        "dropout_rate": 0.1, "pooling": "mean", "activation": "gelu",
    },
    "train": {
        "lr": 1e-3, "backbone_lr": 2e-5, "epochs": 20, "batch_size": 32,
        "groups_per_batch": 8, "weight_decay": 0.0, "patience": 3,
        "n": 2, "prefill_l": 2, "lambda": 0.5, "mode": "fe", "seed": 0,
        "accuracy_floor": 0.0, "coupling_hidden": None,
    },
    "eval": {"rounds": 10, "seed": 0, "batch_groups": 32},
    "data": {
        "task": "keyword", "n_train": 2048, "n_eval": 512, "seed": 0,
        "train_path": None, "eval_path": None,
    },
}


@dataclass
class RunConfig:
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)
    data: dict = field(default_factory=dict)

    def section(self, name: str) -> dict:
        return getattr(self, name)


def load_config(path: str | None) -> RunConfig:
    merged = {s: dict(v) for s, v in CONFIG_DEFAULTS.items()}
    if path is not None:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section in parser.sections():
            if section not in CONFIG_SCHEMA:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, raw in parser[section].items():
                if key not in CONFIG_SCHEMA[section]:
                    raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
                try:
                    merged[section][key] = CONFIG_SCHEMA[section][key](raw)
                except ValueError as exc:
                    raise ConfigError(f"{path}: bad value for {section}.{key}: {raw!r}") from exc
    return RunConfig(**merged)


def encoder_config(cfg: RunConfig) -> EncoderConfig:
    return EncoderConfig(**cfg.model)


def resolve_examples(cfg: RunConfig):
    """Training and evaluation examples from jsonl paths or a synthetic task."""
    data = cfg.data
    if data["train_path"] or data["eval_path"]:
        if not (data["train_path"] and data["eval_path"]):
            raise ConfigError("train_path and eval_path must be given together")
        n_classes = cfg.model["n_classes"]
        return load_jsonl(data["train_path"], n_classes), load_jsonl(data["eval_path"], n_classes)
    return synth_task(data["task"], data["n_train"], data["n_eval"], data["seed"])


def build_vocab(cfg: RunConfig, train_examples) -> Vocab:
    if cfg.data["train_path"]:
        texts = [
            ex.text_a + (" " + ex.text_b if ex.text_b else "") for ex in train_examples
        ]
        return Vocab.build(texts, max_size=cfg.model["vocab_size"])
    return task_vocab(cfg.data["task"])


def _guard_overwrite(path: str, force: bool) -> None:
    if os.path.exists(path) and not force:
        raise ConfigError(f"{path} exists; pass --force to overwrite")


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> None:
    overrides = {
        "n": ("train", "n"),
        "prefill_l": ("train", "prefill_l"),
        "infonce_weight": ("train", "lambda"),
        "mode": ("train", "mode"),
        "seed": ("train", "seed"),
        "rounds": ("eval", "rounds"),
        "eval_seed": ("eval", "seed"),
        "accuracy_floor": ("train", "accuracy_floor"),
    }
    for attr, (section, key) in overrides.items():
        value = getattr(args, attr, None)
        if value is not None:
            cfg.section(section)[key] = value


def _prepare_out(args) -> str:
    out = args.out
    os.makedirs(out, exist_ok=True)
    return out


# -- commands ------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    out = _prepare_out(args)
    ckpt_path = os.path.join(out, "backbone.rvmx")
    _guard_overwrite(ckpt_path, args.force)

    train_ex, eval_ex = resolve_examples(cfg)
    vocab = build_vocab(cfg, train_ex)
    model_cfg = encoder_config(cfg)
    train_ds = tokenize_dataset(train_ex, vocab, model_cfg.max_seq_len)
    eval_ds = tokenize_dataset(eval_ex, vocab, model_cfg.max_seq_len)

    model = EncoderModel(model_cfg, seed=cfg.train["seed"])
    result = train_backbone(
        model, train_ds, eval_ds,
        PretrainConfig(
            lr=cfg.train["lr"], weight_decay=cfg.train["weight_decay"],
            epochs=cfg.train["epochs"], batch_size=cfg.train["batch_size"],
            seed=cfg.train["seed"], patience=cfg.train["patience"],
        ),
        log_path=os.path.join(out, "pretrain_log.csv"),
    )
    final_acc = plain_accuracy(model, eval_ds)
    floor = cfg.train["accuracy_floor"]
    if final_acc < floor:
        raise ConvergenceError(
            f"eval accuracy {final_acc:.4f} below configured floor {floor:.4f}"
        )
    model.save(ckpt_path)
    vocab.save(os.path.join(out, "vocab.txt"))
    save_jsonl(train_ex, os.path.join(out, "train.jsonl"))
    save_jsonl(eval_ex, os.path.join(out, "eval.jsonl"))
    print(f"pretrained backbone: eval accuracy {final_acc:.4f} "
          f"({result.epochs_run} epochs) -> {ckpt_path}")
    return EXIT_OK


def _load_backbone(args) -> tuple[EncoderModel, Vocab]:
    if not os.path.exists(args.backbone):
        raise DataError(f"backbone checkpoint not found: {args.backbone}")
    model = EncoderModel.load(args.backbone)
    vocab_path = args.vocab or os.path.join(os.path.dirname(args.backbone), "vocab.txt")
    if not os.path.exists(vocab_path):
        raise DataError(f"vocab file not found: {vocab_path}")
    return model, Vocab.load(vocab_path)


def cmd_train_adapters(args) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    out = _prepare_out(args)
    ckpt_path = os.path.join(out, "adapters.rvmx")
    _guard_overwrite(ckpt_path, args.force)

    model, vocab = _load_backbone(args)
    train_ex, eval_ex = resolve_examples(cfg)
    train_ds = tokenize_dataset(train_ex, vocab, model.cfg.max_seq_len)
    eval_ds = tokenize_dataset(eval_ex, vocab, model.cfg.max_seq_len)

    adapters = RevMuxAdapters(
        model.cfg.d_model, cfg.train["n"],
        hidden=cfg.train["coupling_hidden"], seed=cfg.train["seed"],
    )
    result = train_adapters(
        model, adapters, train_ds, eval_ds,
        TrainConfig(
            n_inputs=cfg.train["n"],
            prefill_layers=cfg.train["prefill_l"],
            infonce_weight=cfg.train["lambda"],
            mode=cfg.train["mode"],
            lr=cfg.train["lr"],
            backbone_lr=cfg.train["backbone_lr"],
            weight_decay=cfg.train["weight_decay"],
            epochs=cfg.train["epochs"],
            groups_per_batch=cfg.train["groups_per_batch"],
            seed=cfg.train["seed"],
            patience=cfg.train["patience"],
        ),
        log_path=os.path.join(out, "train_log.csv"),
    )
    adapters.save(ckpt_path)
    if cfg.train["mode"] == "ft":
        model.save(os.path.join(out, "backbone_ft.rvmx"))
    best = f"{result.best_accuracy:.4f}" if result.best_accuracy is not None else "n/a"
    print(f"trained adapters (n={cfg.train['n']}, l={cfg.train['prefill_l']}, "
          f"lambda={cfg.train['lambda']}, mode={cfg.train['mode']}): "
          f"best eval accuracy {best} -> {ckpt_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    out = _prepare_out(args)
    model, vocab = _load_backbone(args)
    n = cfg.train["n"]
    adapters = None
    if n > 1:
        if not args.adapters or not os.path.exists(args.adapters):
            raise DataError(f"adapter checkpoint not found: {args.adapters}")
        adapters = RevMuxAdapters.load(args.adapters)
        n = adapters.n
    _, eval_ex = resolve_examples(cfg)
    name = cfg.data["task"] if not cfg.data["eval_path"] else os.path.basename(cfg.data["eval_path"])
    eval_ds = {name: tokenize_dataset(eval_ex, vocab, model.cfg.max_seq_len)}

    report = evaluate_rounds(
        model, adapters, eval_ds, n, cfg.train["prefill_l"],
        rounds=cfg.eval["rounds"], seed=cfg.eval["seed"],
        infonce_weight=cfg.train["lambda"], batch_groups=cfg.eval["batch_groups"],
    )
    report.save(os.path.join(out, "report.json"))
    save_cdf_csv(accuracy_cdf(report.rounds), os.path.join(out, "cdf.csv"))
    for ds_name, stats in report.per_dataset.items():
        print(f"{ds_name}: {stats['mean']:.4f} ± {stats['std']:.4f} "
              f"over {len(stats['rounds'])} rounds")
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    out = _prepare_out(args)
    model_cfg = encoder_config(cfg)
    n_set = [int(v) for v in args.n_set.split(",")] if args.n_set else [1, 2, 4, 8]
    hidden = cfg.train["coupling_hidden"]

    rows = []
    for n in n_set:
        if n > 1:
            model_cfg.check_divisible(n)
        for l in range(model_cfg.n_layers + 1):
            adapters = RevMuxAdapters(model_cfg.d_model, n, hidden=hidden) if n > 1 else None
            report = count_flops(model_cfg, adapters, n, l, batch=args.batch, seq_len=args.seq_len)
            rows.append(report)

    table_path = os.path.join(out, "flops_sweep.csv")
    tmp = table_path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "l", "flops_single", "flops_composite", "speedup_percent"])
        for r in rows:
            writer.writerow([r.n_inputs, r.prefill_layers, r.flops_single,
                             r.flops_composite, f"{r.speedup_percent:.2f}"])
    os.replace(tmp, table_path)

    primary = count_flops(
        model_cfg,
        RevMuxAdapters(model_cfg.d_model, cfg.train["n"], hidden=hidden) if cfg.train["n"] > 1 else None,
        cfg.train["n"], cfg.train["prefill_l"], batch=args.batch, seq_len=args.seq_len,
    )
    primary.save(os.path.join(out, "flops.json"))
    print(f"{'n':>3} {'l':>3} {'speedup':>9}")
    for r in rows:
        print(f"{r.n_inputs:>3} {r.prefill_layers:>3} {r.speedup_percent:>8.1f}%")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    out = _prepare_out(args)
    model, vocab = _load_backbone(args)
    train_ex, eval_ex = resolve_examples(cfg)
    train_ds = tokenize_dataset(train_ex, vocab, model.cfg.max_seq_len)
    eval_ds = tokenize_dataset(eval_ex, vocab, model.cfg.max_seq_len)

    n_set = sorted({int(v) for v in args.n_set.split(",")})
    l_set = sorted({int(v) for v in args.l_set.split(",")}) if args.l_set else list(
        range(model.cfg.n_layers + 1)
    )
    results_path = os.path.join(out, "sweep_results.csv")
    done: dict[tuple[int, int], dict] = {}
    if os.path.exists(results_path):
        with open(results_path) as fh:
            for row in csv.DictReader(fh):
                done[(int(row["n"]), int(row["l"]))] = row

    hidden = cfg.train["coupling_hidden"]
    backbone_state = {name: p.data.copy() for name, p in model.named_parameters().items()}
    for n in n_set:
        model.cfg.check_divisible(n)
        for l in l_set:
            if (n, l) in done:
                continue
            for name, p in model.named_parameters().items():
                p.data = backbone_state[name].copy()
            adapters = RevMuxAdapters(model.cfg.d_model, n, hidden=hidden, seed=cfg.train["seed"])
            train_adapters(
                model, adapters, train_ds, eval_ds,
                TrainConfig(
                    n_inputs=n, prefill_layers=l,
                    infonce_weight=cfg.train["lambda"], mode=cfg.train["mode"],
                    lr=cfg.train["lr"], backbone_lr=cfg.train["backbone_lr"],
                    weight_decay=cfg.train["weight_decay"], epochs=cfg.train["epochs"],
                    groups_per_batch=cfg.train["groups_per_batch"],
                    seed=cfg.train["seed"], patience=cfg.train["patience"],
                ),
            )
            report = evaluate_rounds(
                model, adapters, eval_ds, n, l,
                rounds=cfg.eval["rounds"], seed=cfg.eval["seed"],
                infonce_weight=cfg.train["lambda"],
            )
            flops = count_flops(model.cfg, adapters, n, l)
            done[(n, l)] = {
                "n": n, "l": l,
                "mean_accuracy": f"{report.mean:.6f}",
                "std_accuracy": f"{report.std:.6f}",
                "speedup_percent": f"{flops.speedup_percent:.2f}",
            }
            print(f"sweep cell n={n} l={l}: accuracy {report.mean:.4f} "
                  f"speedup {flops.speedup_percent:.1f}%")
            _write_sweep(results_path, done)
    _write_sweep(results_path, done)
    return EXIT_OK


def _write_sweep(path: str, done: dict) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(
            fh, fieldnames=["n", "l", "mean_accuracy", "std_accuracy", "speedup_percent"]
        )
        writer.writeheader()
        for key in sorted(done):
            writer.writerow(done[key])
    os.replace(tmp, path)


# -- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="revmux",
        description="Reversible multi-input multiplexing over a frozen text encoder.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_backbone=False):
        p.add_argument("--config", default=None, help="INI config file")
        p.add_argument("--out", default="revmux_out", help="output directory")
        p.add_argument("--seed", type=int, default=None, help="training seed override")
        if needs_backbone:
            p.add_argument("--backbone", required=True, help="backbone checkpoint path")
            p.add_argument("--vocab", default=None, help="vocab file (default: next to backbone)")

    p = sub.add_parser("pretrain", help="train the backbone encoder")
    common(p)
    p.add_argument("--force", action="store_true", help="overwrite existing checkpoint")
    p.add_argument("--accuracy-floor", dest="accuracy_floor", type=float, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-adapters", help="train the multiplexing adapters")
    common(p, needs_backbone=True)
    p.add_argument("--force", action="store_true")
    p.add_argument("--n", type=int, default=None, help="inputs per composite group")
    p.add_argument("--prefill-l", dest="prefill_l", type=int, default=None)
    p.add_argument("--lambda", dest="infonce_weight", type=float, default=None)
    p.add_argument("--mode", choices=["fe", "ft"], default=None)
    p.set_defaults(func=cmd_train_adapters)

    p = sub.add_parser("eval", help="multi-round evaluation")
    common(p, needs_backbone=True)
    p.add_argument("--adapters", default=None, help="adapter checkpoint path")
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--prefill-l", dest="prefill_l", type=int, default=None)
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--eval-seed", dest="eval_seed", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="analytical speedup sweep")
    common(p)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--prefill-l", dest="prefill_l", type=int, default=None)
    p.add_argument("--n-set", default=None, help="comma list of group widths")
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--seq-len", dest="seq_len", type=int, default=128)
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("sweep", help="train and evaluate an (n, l) grid")
    common(p, needs_backbone=True)
    p.add_argument("--n-set", default="2,4", help="comma list of group widths")
    p.add_argument("--l-set", default=None, help="comma list of prefill depths")
    p.add_argument("--rounds", type=int, default=None)
    p.add_argument("--lambda", dest="infonce_weight", type=float, default=None)
    p.add_argument("--mode", choices=["fe", "ft"], default=None)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, CheckpointFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, ConvergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
