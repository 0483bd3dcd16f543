"""Command-line interface: ``mwer-rescore {gen-data,pretrain,train,evaluate,ablate}``.

Every command that trains writes a fixed layout under ``--out``::

    config.echo.json   effective configuration (file values + flag overrides)
    checkpoints/       model checkpoint(s)
    logs/              per-epoch JSON lines
    report.json        final metrics

Hyperparameters come from an optional INI file (``[model]`` and ``[train]``
sections whose keys are :class:`LmConfig` / :class:`TrainConfig` field names);
command-line flags override it.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Sequence

from .lm import LmConfig, RescoreModel, Vocabulary, encode_tokens, perplexity
from .rescore_eval import ALPHA_GRID, evaluate, tune_alpha
from .simulator import (
    DEFAULT_GRAMMAR,
    GrammarSpec,
    SimConfig,
    generate_calibrated_task,
    generate_task,
    read_jsonl,
    split_wers,
    write_task,
)
from .training import (
    Checkpoint,
    CheckpointError,
    TrainConfig,
    init_from_pretrained,
    load_checkpoint,
    pretrain_xent,
    save_checkpoint,
    train_mwer,
)

log = logging.getLogger("mwer_rescore")

# toy-scale model dimensions and training budget used unless overridden
TOY_MODEL = dict(embed_dim=32, hidden_dim=48, context_dim=16, attention_dim=16)
TOY_TRAIN = dict(lr=5e-3, epochs=10)

HEAD_FLAGS = {"norm": "normalized", "unnorm": "unnormalized"}
ATTENTION_ROWS = (("A3", "a3"), ("A1", "a1"), ("A2", "a2"), ("A1+A3", "a1a3"))
ENCODER_ROWS = (("none", "none"), ("PyLSTM", "pylstm"), ("TDNN", "tdnn"), ("CNN", "cnn"))


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def _coerce(value: str, like):
    if isinstance(like, bool):
        return value.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def read_config(path: str | None) -> dict[str, dict]:
    """``{"model": {...}, "train": {...}}`` from an INI file, typed by the dataclass defaults."""
    out: dict[str, dict] = {"model": {}, "train": {}}
    if path is None:
        return out
    parser = configparser.ConfigParser()
    if not parser.read(path, encoding="utf-8"):
        raise FileNotFoundError(f"config file {path} not found")
    defaults = {
        "model": {f.name: f.default for f in fields(LmConfig) if f.name != "vocab_size"},
        "train": asdict(TrainConfig()),
    }
    for section in parser.sections():
        if section not in defaults:
            raise ValueError(f"config {path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            if key not in defaults[section]:
                raise ValueError(f"config {path}: unknown key {key!r} in [{section}]")
            out[section][key] = _coerce(raw, defaults[section][key])
    return out


def _train_overrides(args) -> dict:
    pairs = {
        "lr": args.lr,
        "epochs": args.epochs,
        "seed": args.seed,
        "batch_size": args.batch_size,
        "lam": getattr(args, "lam", None),
        "alpha": getattr(args, "alpha", None),
        "patience": args.patience,
        "optimizer": args.optimizer,
    }
    return {k: v for k, v in pairs.items() if v is not None}


def effective_configs(args, vocab: Vocabulary, audio_dim: int, model_extra: dict | None = None):
    file_cfg = read_config(args.config)
    model = {**TOY_MODEL, **file_cfg["model"], **(model_extra or {})}
    model["audio_dim"] = audio_dim
    train = {**TOY_TRAIN, **file_cfg["train"], **_train_overrides(args)}
    return LmConfig(vocab_size=len(vocab), **model), TrainConfig(**train)


# ---------------------------------------------------------------------------
# data and output helpers


def load_data(data_dir, splits: Sequence[str]) -> tuple[Vocabulary, dict]:
    root = Path(data_dir)
    if not (root / "vocab.txt").is_file():
        raise FileNotFoundError(f"{root}: no vocab.txt (run gen-data first)")
    vocab = Vocabulary.load(root / "vocab.txt")
    data = {}
    for name in splits:
        path = root / f"{name}.jsonl"
        if not path.is_file():
            raise FileNotFoundError(f"{root}: missing {name}.jsonl")
        data[name] = read_jsonl(path, vocab)
    return vocab, data


def _optional_split(data_dir, name: str, vocab: Vocabulary):
    path = Path(data_dir) / f"{name}.jsonl"
    return read_jsonl(path, vocab) if path.is_file() else None


def _pretrain_texts(data_dir, train_utts) -> list[str]:
    path = Path(data_dir) / "text.txt"
    if path.is_file():
        lines = [l for l in path.read_text(encoding="utf-8").splitlines() if l.strip()]
        if lines:
            return lines
    return [u.ref for u in train_utts]


def prepare_out(out_dir) -> Path:
    out = Path(out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    (out / "logs").mkdir(exist_ok=True)
    return out


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_log(path: Path, history: list[dict]) -> None:
    path.write_text("".join(json.dumps(h, sort_keys=True) + "\n" for h in history), encoding="utf-8")


def rescoring_report(model: RescoreModel, vocab: Vocabulary, dev, test, alpha=None) -> dict:
    """Dev/test reports with ``alpha`` fixed, or tuned on dev over the grid when None."""
    if alpha is None:
        alpha, _ = tune_alpha(dev, model, vocab, ALPHA_GRID)
    report = {"alpha": alpha, "params": model.num_params(), "dev": evaluate(dev, model, vocab, alpha).to_dict()}
    if test:
        report["test"] = evaluate(test, model, vocab, alpha).to_dict()
    return report


# ---------------------------------------------------------------------------
# variants


def resolve_variant(variant: str, head: str | None, attention: str | None, encoder: str | None, init) -> dict:
    """Check flag compatibility; returns the LmConfig fields of the variant."""
    if variant == "xent":
        if attention or encoder:
            raise UsageError("--attention/--encoder need --variant mwe-audio")
        if head == "unnorm":
            raise UsageError("cross-entropy training needs the normalized head")
        if init:
            raise UsageError("--init applies to MWER fine-tuning, not --variant xent")
        return {"head": "normalized", "attention": "none", "encoder": "none"}
    if variant == "mwe":
        if attention or encoder:
            raise UsageError("--attention/--encoder need --variant mwe-audio")
        return {"head": HEAD_FLAGS[head or "unnorm"], "attention": "none", "encoder": "none"}
    if variant == "mwe-audio":
        return {"head": HEAD_FLAGS[head or "unnorm"], "attention": attention or "a3", "encoder": encoder or "cnn"}
    raise UsageError(f"unknown variant {variant!r}")


def train_variant(
    lm_cfg: LmConfig,
    train_cfg: TrainConfig,
    vocab: Vocabulary,
    train,
    dev,
    init: Checkpoint | None = None,
    zero_context: bool = False,
    on_epoch=None,
) -> Checkpoint:
    """MWER fine-tuning of one configuration from random or pretrained weights."""
    if init is not None:
        model = init_from_pretrained(init, lm_cfg, vocab.hash, seed=train_cfg.seed, zero_context=zero_context)
    else:
        model = RescoreModel(lm_cfg, seed=train_cfg.seed)
    return train_mwer(train, dev, model, vocab, train_cfg, on_epoch=on_epoch)


def train_xent(lm_cfg: LmConfig, train_cfg: TrainConfig, vocab: Vocabulary, texts, dev_texts, on_epoch=None):
    return pretrain_xent(texts, vocab, lm_cfg, train_cfg, dev_texts, on_epoch=on_epoch)


def _epoch_printer(quiet: bool):
    if quiet:
        return None

    def show(h: dict) -> None:
        metric = "dev_wer" if "dev_wer" in h else "dev_ppl"
        print(f"epoch {h['epoch']}: {metric} {h[metric]:.3f}", file=sys.stderr, flush=True)

    return show


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    grammar = GrammarSpec.load(args.grammar) if args.grammar else DEFAULT_GRAMMAR
    base = SimConfig()
    cfg = SimConfig(
        sigma=base.sigma if args.sigma is None else args.sigma,
        jitter=base.jitter if args.jitter is None else args.jitter,
        nbest=args.nbest,
        dim=args.dim,
    )
    if cfg.sigma < 0 or cfg.jitter < 0:
        raise UsageError("--sigma and --jitter must be nonnegative")
    sizes = {"train": args.train_utts, "dev": args.dev_utts, "test": args.test_utts}
    sizes = {k: v for k, v in sizes.items() if v > 0}
    if not sizes:
        raise UsageError("at least one split needs a positive size")
    text_size = args.text_utts if args.text_utts is not None else sizes.get("train", 0)
    noisy = cfg.sigma > 0 or cfg.jitter > 0
    if args.recalibrate and noisy:
        task = generate_calibrated_task(grammar, sizes, cfg, args.seed, text_size)
    else:
        task = generate_task(grammar, sizes, cfg, args.seed, text_size)
    out = write_task(task, args.out)
    for name, utts in task.splits.items():
        top1, orc = split_wers(utts, cfg.nbest)
        print(f"{name}: {len(utts)} utts  baseline WER {top1:.1f}%  oracle WER {orc:.1f}%")
    if task.seed != args.seed:
        print(f"note: seed {args.seed} fell outside the calibrated WER range; used seed {task.seed}")
    print(f"wrote {out}")
    return 0


def cmd_pretrain(args) -> int:
    vocab, data = load_data(args.data, ["train"])
    dev = _optional_split(args.data, "dev", vocab)
    lm_cfg, tc = effective_configs(args, vocab, data["train"][0].frames.shape[1], {"head": "normalized"})
    texts = _pretrain_texts(args.data, data["train"])
    dev_texts = [u.ref for u in dev] if dev else None
    out = prepare_out(args.out)
    write_json(out / "config.echo.json", {"command": "pretrain", "data": str(args.data), "model": lm_cfg.to_dict(), "train": asdict(tc)})
    ck = train_xent(lm_cfg, tc, vocab, texts, dev_texts, _epoch_printer(args.quiet))
    save_checkpoint(ck, out / "checkpoints" / "xent.ckpt")
    write_log(out / "logs" / "pretrain.jsonl", ck.metadata["history"])
    report = {"best_dev_ppl": ck.metadata["best_dev_ppl"], "params": ck.model().num_params()}
    write_json(out / "report.json", report)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_train(args) -> int:
    variant = resolve_variant(args.variant, args.head, args.attention, args.encoder, args.init)
    vocab, data = load_data(args.data, ["train", "dev"])
    test = _optional_split(args.data, "test", vocab)
    lm_cfg, tc = effective_configs(args, vocab, data["train"][0].frames.shape[1], variant)
    out = prepare_out(args.out)
    echo = {"command": "train", "variant": args.variant, "data": str(args.data), "init": args.init, "model": lm_cfg.to_dict(), "train": asdict(tc)}
    write_json(out / "config.echo.json", echo)
    show = _epoch_printer(args.quiet)
    if args.variant == "xent":
        texts = _pretrain_texts(args.data, data["train"])
        ck = train_xent(lm_cfg, tc, vocab, texts, [u.ref for u in data["dev"]], show)
    else:
        init = load_checkpoint(args.init) if args.init else None
        ck = train_variant(lm_cfg, tc, vocab, data["train"], data["dev"], init, on_epoch=show)
    save_checkpoint(ck, out / "checkpoints" / f"{args.variant}.ckpt")
    write_log(out / "logs" / "train.jsonl", ck.metadata["history"])
    model = ck.model()
    report = {"variant": args.variant, **rescoring_report(model, vocab, data["dev"], test)}
    if model.normalized and not model.config.uses_audio:
        report["dev_ppl"] = perplexity([encode_tokens(u.ref, vocab) for u in data["dev"]], model)
    write_json(out / "report.json", report)
    print(json.dumps(report.get("test", report["dev"]), sort_keys=True))
    return 0


def _parse_alpha(text: str):
    if text == "tune":
        return None
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError("alpha must be a number or 'tune'") from None
    if value < 0:
        raise argparse.ArgumentTypeError("alpha must be nonnegative")
    return value


def cmd_evaluate(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    vocab, data = load_data(args.data, [args.split])
    if ck.vocab_hash != vocab.hash:
        raise ValueError("checkpoint vocabulary does not match the dataset vocabulary")
    model = ck.model()
    alpha = args.alpha
    if alpha is None:
        _, dev = load_data(args.data, ["dev"])
        alpha, _ = tune_alpha(dev["dev"], model, vocab)
    report = evaluate(data[args.split], model, vocab, alpha)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "report.json", {"alpha": alpha, **report.to_dict()})
    print(report.to_json())
    return 0


def run_ablation(study: str, lm_base: LmConfig, tc: TrainConfig, vocab, train, dev, test, init=None, on_epoch=None) -> list[dict]:
    """Train every row of ``study`` with the same seed and budget; one result dict per row."""
    if study == "attention":
        rows = [(label, {"attention": a, "encoder": "cnn"}) for label, a in ATTENTION_ROWS]
    elif study == "encoder":
        rows = [(label, {"attention": "a3", "encoder": e}) for label, e in ENCODER_ROWS]
    else:
        raise UsageError(f"unknown study {study!r}")
    results = []
    for label, change in rows:
        cfg = LmConfig.from_dict({**lm_base.to_dict(), **change})
        ck = train_variant(cfg, tc, vocab, train, dev, init, on_epoch=on_epoch)
        model = ck.model()
        rep = rescoring_report(model, vocab, dev, test)
        final = rep.get("test", rep["dev"])
        results.append(
            {
                "row": label,
                **change,
                "params": rep["params"],
                "alpha": rep["alpha"],
                "wer": final["wer"],
                "werr": final["werr"],
                "baseline_wer": final["baseline_wer"],
                "history": ck.metadata["history"],
            }
        )
    return results


def format_table(study: str, rows: list[dict]) -> str:
    title = "Attention location" if study == "attention" else "Encoder type"
    lines = [f"{title:<20} {'# params':>10} {'WER':>8} {'WERR':>8}"]
    for r in rows:
        lines.append(f"{r['row']:<20} {r['params']:>10d} {r['wer']:>7.2f}% {r['werr']:>7.2f}%")
    return "\n".join(lines)


def cmd_ablate(args) -> int:
    vocab, data = load_data(args.data, ["train", "dev"])
    test = _optional_split(args.data, "test", vocab)
    head = HEAD_FLAGS[args.head]
    lm_base, tc = effective_configs(args, vocab, data["train"][0].frames.shape[1], {"head": head, "attention": "a3"})
    out = prepare_out(args.out)
    write_json(out / "config.echo.json", {"command": "ablate", "study": args.study, "data": str(args.data), "init": args.init, "model": lm_base.to_dict(), "train": asdict(tc)})
    init = load_checkpoint(args.init) if args.init else None
    rows = run_ablation(args.study, lm_base, tc, vocab, data["train"], data["dev"], test, init, _epoch_printer(args.quiet))
    for r in rows:
        write_log(out / "logs" / f"{r['attention']}-{r['encoder']}.jsonl", r.pop("history"))
    write_json(out / "report.json", {"study": args.study, "split": "test" if test else "dev", "rows": rows})
    print(format_table(args.study, rows))
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _common_train_flags(p: argparse.ArgumentParser, with_loss: bool) -> None:
    p.add_argument("--data", required=True, help="directory written by gen-data")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="INI file with [model] and [train] sections")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--optimizer", choices=("adam", "sgd"))
    p.add_argument("--seed", type=int)
    p.add_argument("--quiet", action="store_true", help="no per-epoch progress on stderr")
    if with_loss:
        p.add_argument("--alpha", type=float, help="LM weight inside the training posterior")
        p.add_argument("--lambda", dest="lam", type=float, help="weight of the reference cross-entropy term")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mwer-rescore", description="MWER-trained LSTM n-best rescoring with audio attention")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic first-pass dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--grammar", help="grammar JSON (templates, slots, weights)")
    g.add_argument("--train-utts", type=int, default=3000)
    g.add_argument("--dev-utts", type=int, default=300)
    g.add_argument("--test-utts", type=int, default=500)
    g.add_argument("--text-utts", type=int, help="text-only pretraining sentences (default: train size)")
    g.add_argument("--sigma", type=float, help="frame noise std")
    g.add_argument("--jitter", type=float, help="per-hypothesis acoustic score noise std")
    g.add_argument("--nbest", type=int, default=10)
    g.add_argument("--dim", type=int, default=32, help="acoustic embedding dimension")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--no-recalibrate", dest="recalibrate", action="store_false", help="keep the seed even if WER is outside 8-25%%")
    g.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="cross-entropy pretraining on text")
    _common_train_flags(p, with_loss=False)
    p.set_defaults(func=cmd_pretrain)

    t = sub.add_parser("train", help="train one model variant")
    _common_train_flags(t, with_loss=True)
    t.add_argument("--variant", required=True, choices=("xent", "mwe", "mwe-audio"))
    t.add_argument("--head", choices=tuple(HEAD_FLAGS))
    t.add_argument("--attention", choices=("a1", "a2", "a3", "a1a3"))
    t.add_argument("--encoder", choices=("none", "cnn", "tdnn", "pylstm"))
    t.add_argument("--init", help="XENT checkpoint to fine-tune from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="rescore a split with a checkpoint")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--alpha", type=_parse_alpha, default=1.0, help="LM weight, or 'tune' to pick it on dev")
    e.add_argument("--split", default="test")
    e.add_argument("--out")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="attention-location or encoder study")
    _common_train_flags(a, with_loss=True)
    a.add_argument("--study", required=True, choices=("attention", "encoder"))
    a.add_argument("--head", choices=tuple(HEAD_FLAGS), default="unnorm")
    a.add_argument("--init", help="XENT checkpoint to fine-tune every row from")
    a.set_defaults(func=cmd_ablate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"mwer-rescore {args.command}: usage error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError, CheckpointError, KeyError) as e:
        print(f"mwer-rescore {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
