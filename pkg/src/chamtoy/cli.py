"""Command-line entry point.

Configuration is a flat key-value space ("model.d_model 64") read from an
optional file and overridden with repeated --set key=value flags; unknown
keys are rejected.  Every run echoes its effective configuration before
doing work.  Seeds resolve in order: --seed flag, train.seed from config,
the CHAMTOY_SEED environment variable, then 0.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error,
3 when the divergence monitor flagged the run.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    MixtureSpec,
    PretrainBatcher,
    SFTBatcher,
    build_caption_sequence,
    build_text_sequence,
    load_caption_corpus,
    load_sft_corpus,
    load_text_corpus,
    pack_sft,
    prepare_image,
)
from .decoder import DecodePolicy, detokenize_mixed, generate_stream, Finished
from .evalkit import (
    bootstrap_ci,
    format_summary_table,
    judgment_win_rate,
    krippendorff_alpha,
    load_annotations,
    load_judgments,
    summarize_judgments,
)
from .model import (
    NormStrategy,
    init_params,
    load_checkpoint,
    preset,
    save_checkpoint,
    config_with,
)
from .tokenizer import (
    BPETokenizer,
    Codebook,
    MixedVocab,
    encode_image,
    read_pixmap,
    train_bpe,
    train_codebook,
    write_pixmap,
)
from .tokenizer.codebook import to_uint8
from .trainer import (
    DivergenceMonitor,
    OptimConfig,
    ablation_pair,
    load_log,
    save_log,
    train_loop,
)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3

SEED_ENV = "CHAMTOY_SEED"


class ConfigError(Exception):
    pass


def _parse_bool(raw: str) -> bool:
    if raw in ("true", "1", "yes"):
        return True
    if raw in ("false", "0", "no"):
        return False
    raise ValueError(f"expected a boolean, got {raw!r}")


# key -> (type converter, default)
SCHEMA: dict[str, tuple] = {
    "model.preset": (str, "toy"),
    "model.d_model": (int, 64),
    "model.n_layers": (int, 2),
    "model.n_heads": (int, 4),
    "model.n_kv_heads": (int, 4),
    "model.ffn_hidden": (int, 128),
    "model.max_seq": (int, 256),
    "model.dropout": (float, 0.0),
    "model.qk_norm": (_parse_bool, True),
    "model.z_coeff": (float, 1e-5),
    "model.norm_strategy": (str, "post_norm_reorder"),
    "model.norm_eps": (float, 1e-5),
    "optim.lr": (float, 1e-4),
    "optim.beta1": (float, 0.9),
    "optim.beta2": (float, 0.95),
    "optim.eps": (float, 1e-5),
    "optim.weight_decay": (float, 0.1),
    "optim.clip_norm": (float, 1.0),
    "optim.warmup_steps": (int, 40),
    "optim.schedule": (str, "exp-decay"),
    "optim.final_lr_fraction": (float, 0.01),
    "train.steps": (int, 400),
    "train.batch_size": (int, 8),
    "train.seq_len": (int, 64),
    "train.seed": (int, -1),
    "train.halt_on_divergence": (_parse_bool, False),
    "data.stage1": (str, "text:0.75,captions:0.25"),
    "data.stage2_extra": (str, "captions:0.25"),
    "data.image_fit": (str, "crop"),
    "tokenizer.vocab_size": (int, 320),
    "tokenizer.image_codes": (int, 256),
    "tokenizer.patch": (int, 4),
    "tokenizer.image_size": (int, 32),
    "tokenizer.kmeans_iters": (int, 10),
    "generate.mode": (str, "unconstrained"),
    "generate.max_new_tokens": (int, 96),
    "generate.temperature": (float, 1.0),
    "generate.append_sep": (_parse_bool, False),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)
    explicit: set = field(default_factory=set)

    def __getitem__(self, key: str):
        return self.values[key]

    def set(self, key: str, raw: str) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown configuration key {key!r}")
        conv, _ = SCHEMA[key]
        try:
            self.values[key] = conv(raw)
        except ValueError as e:
            raise ConfigError(f"bad value for {key}: {e}") from e
        self.explicit.add(key)

    def soft_set(self, key: str, value) -> None:
        """Change a default without marking the key user-set."""
        if key not in self.explicit:
            self.values[key] = value

    def render(self) -> str:
        lines = ["# effective configuration"]
        for key in sorted(self.values):
            v = self.values[key]
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{key} {v}")
        return "\n".join(lines)


def make_run_config(args) -> RunConfig:
    run = RunConfig(values={k: d for k, (_, d) in SCHEMA.items()})
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        for lineno, line in enumerate(path.read_text().splitlines(), 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, raw = line.partition(" ")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected 'key value'")
            run.set(key, raw.strip())
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        run.set(key.strip(), raw.strip())
    if getattr(args, "seed", None) is not None:
        run.set("train.seed", str(args.seed))
    if run["train.seed"] < 0:
        env = os.environ.get(SEED_ENV)
        run.soft_set("train.seed", int(env) if env else 0)
    return run


def parse_mixture(raw: str) -> dict[str, float]:
    out: dict[str, float] = {}
    if not raw.strip():
        return out
    for part in raw.split(","):
        name, sep, weight = part.partition(":")
        if not sep:
            raise ConfigError(f"mixture entry {part!r} must be name:weight")
        try:
            out[name.strip()] = float(weight)
        except ValueError as e:
            raise ConfigError(f"bad mixture weight in {part!r}") from e
    return out


def build_model_config(run: RunConfig, vocab_size: int):
    kw = dict(
        d_model=run["model.d_model"],
        n_layers=run["model.n_layers"],
        n_heads=run["model.n_heads"],
        ffn_hidden=run["model.ffn_hidden"],
        max_seq=run["model.max_seq"],
        norm_eps=run["model.norm_eps"],
    )
    # recipe knobs follow the preset unless the user pinned them
    for name in ("dropout", "qk_norm", "z_coeff", "n_kv_heads"):
        key = f"model.{name}"
        if key in run.explicit:
            kw[name] = run[key]
    if "model.norm_strategy" in run.explicit:
        try:
            kw["norm_strategy"] = NormStrategy(run["model.norm_strategy"])
        except ValueError as e:
            raise ConfigError(str(e)) from e
    try:
        return preset(run["model.preset"], vocab_size=vocab_size, **kw)
    except (KeyError, ValueError) as e:
        raise ConfigError(str(e)) from e


def build_optim_config(run: RunConfig) -> OptimConfig:
    try:
        return OptimConfig(
            lr=run["optim.lr"],
            beta1=run["optim.beta1"],
            beta2=run["optim.beta2"],
            eps=run["optim.eps"],
            weight_decay=run["optim.weight_decay"],
            clip_norm=run["optim.clip_norm"],
            warmup_steps=run["optim.warmup_steps"],
            total_steps=run["train.steps"],
            schedule=run["optim.schedule"],
            final_lr_fraction=run["optim.final_lr_fraction"],
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _load_tokenizer_dir(tok_dir) -> tuple[BPETokenizer, Codebook, MixedVocab]:
    tok_dir = Path(tok_dir)
    tok = BPETokenizer.load(tok_dir / "tokenizer.txt")
    book = Codebook.load(tok_dir / "codebook.bin")
    return tok, book, MixedVocab(n_text=tok.vocab_size, n_image=book.n_codes)


def _seed(run: RunConfig) -> int:
    return run["train.seed"]


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------


def cmd_tokenizer_train(run: RunConfig, args) -> int:
    print(run.render())
    data_dir = Path(args.data_dir)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    texts = load_text_corpus(data_dir / "text.jsonl")
    captions = load_caption_corpus(data_dir / "captions.jsonl")

    tok = train_bpe(texts + [c for c, _ in captions], run["tokenizer.vocab_size"])
    tok.save(out_dir / "tokenizer.txt")

    size = run["tokenizer.image_size"]
    images = [
        prepare_image(read_pixmap(data_dir / rel), size, mode=run["data.image_fit"])
        for _, rel in captions
    ]
    book, history = train_codebook(
        images,
        n_codes=run["tokenizer.image_codes"],
        patch=run["tokenizer.patch"],
        iters=run["tokenizer.kmeans_iters"],
        seed=_seed(run),
    )
    book.save(out_dir / "codebook.bin")

    vocab = MixedVocab(n_text=tok.vocab_size, n_image=book.n_codes)
    print(f"text tokens: {tok.vocab_size} ({len(tok.merges)} merges)")
    print(f"image codes: {book.n_codes}, {book.tokens_per_image(size, size)} per image")
    print(f"total vocabulary: {vocab.total}")
    print(f"codebook mse: {history[0]:.6f} -> {history[-1]:.6f}")
    return EXIT_OK


def _build_docs(run: RunConfig, data_dir: Path, tok, book, vocab, rng):
    docs: dict[str, list[list[int]]] = {}
    text_path = data_dir / "text.jsonl"
    if text_path.exists():
        docs["text"] = [
            build_text_sequence(tok.encode(t), vocab) for t in load_text_corpus(text_path)
        ]
    cap_path = data_dir / "captions.jsonl"
    if cap_path.exists():
        size = run["tokenizer.image_size"]
        caps = []
        for caption, rel in load_caption_corpus(cap_path):
            img = prepare_image(read_pixmap(data_dir / rel), size, mode=run["data.image_fit"])
            seq, _ = build_caption_sequence(
                tok.encode(caption), encode_image(img, book), vocab, rng
            )
            caps.append(seq)
        docs["captions"] = caps
    return docs


def cmd_train(run: RunConfig, args) -> int:
    print(run.render())
    tok, book, vocab = _load_tokenizer_dir(args.tokenizer_dir)
    data_dir = Path(args.data_dir)
    out_dir = Path(args.out_dir)
    seed = _seed(run)

    docs = _build_docs(run, data_dir, tok, book, vocab, np.random.default_rng(seed))
    mixture = MixtureSpec(
        stage1=parse_mixture(run["data.stage1"]),
        stage2_extra=parse_mixture(run["data.stage2_extra"]),
    )
    missing = [s for s in {**mixture.stage1, **mixture.stage2_extra} if s not in docs]
    if missing:
        raise ConfigError(f"mixture names sources with no documents: {missing}")

    total = run["train.steps"]
    batcher = PretrainBatcher(
        docs, mixture, total, run["train.batch_size"], run["train.seq_len"]
    )
    opt_cfg = build_optim_config(run)

    if args.ablate:
        return _run_ablation(run, args, batcher, opt_cfg, vocab, out_dir, seed)

    if args.resume:
        params, cfg, opt_state, start = load_checkpoint(args.resume)
        if cfg.vocab_size != vocab.total:
            raise ConfigError(
                f"checkpoint vocabulary {cfg.vocab_size} != tokenizer vocabulary {vocab.total}"
            )
        start = start or 0
    else:
        cfg = build_model_config(run, vocab.total)
        params = init_params(cfg, seed=seed)
        opt_state, start = None, 0

    result = train_loop(
        params, cfg, opt_cfg, batcher.batch,
        seed=seed, start_step=start, opt_state=opt_state,
        halt_on_divergence=run["train.halt_on_divergence"],
    )
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "checkpoint", result.params, cfg,
                    opt_state=result.opt_state, step=result.final_step)
    save_log(result.rows, out_dir / "loss.csv")
    (out_dir / "effective_config.txt").write_text(run.render() + "\n")

    if result.rows:
        first, last = result.rows[0], result.rows[-1]
        print(f"steps {start}..{result.final_step}: ce {first['ce']:.4f} -> {last['ce']:.4f}")
    if result.diverged:
        print(
            f"divergence flagged after {result.monitor.diverged_at} monitored steps",
            file=sys.stderr,
        )
        return EXIT_DIVERGED
    return EXIT_OK


def _run_ablation(run, args, batcher, opt_cfg, vocab, out_dir: Path, seed: int) -> int:
    if args.ablate != "qknorm":
        raise ConfigError(f"unknown ablation {args.ablate!r}")

    def make_cfg(qk_norm):
        inner = RunConfig(values=dict(run.values), explicit=set(run.explicit))
        inner.values["model.qk_norm"] = qk_norm
        inner.explicit.add("model.qk_norm")
        return build_model_config(inner, vocab.total)

    pair = ablation_pair(make_cfg, opt_cfg, batcher.batch, steps=run["train.steps"], seed=seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    for label, result in pair.items():
        save_log(result.rows, out_dir / f"loss_qknorm_{label}.csv")
        last = result.rows[-1]
        print(f"qknorm {label}: final ce {last['ce']:.4f}, diverged {bool(result.diverged)}")
    return EXIT_OK


def cmd_sft(run: RunConfig, args) -> int:
    # tuning defaults: small peak rate on a cosine schedule, light dropout,
    # unchanged z penalty
    run.soft_set("optim.lr", 1e-5)
    run.soft_set("optim.schedule", "cosine")
    run.soft_set("model.dropout", 0.05)
    print(run.render())

    tok, book, vocab = _load_tokenizer_dir(args.tokenizer_dir)
    params, cfg, _, _ = load_checkpoint(args.init)
    if cfg.vocab_size != vocab.total:
        raise ConfigError(
            f"checkpoint vocabulary {cfg.vocab_size} != tokenizer vocabulary {vocab.total}"
        )
    cfg = config_with(cfg, dropout=run["model.dropout"])

    pairs = load_sft_corpus(Path(args.data_dir) / "sft.jsonl")
    examples = [(tok.encode(p), tok.encode(a)) for p, a in pairs]
    packed = pack_sft(examples, max_len=run["train.seq_len"] + 1, vocab=vocab)
    if packed.rejections:
        print(f"rejected {len(packed.rejections)} oversized examples", file=sys.stderr)
    batcher = SFTBatcher(packed)

    opt_cfg = build_optim_config(run)
    seed = _seed(run)
    batch_size = run["train.batch_size"]
    result = train_loop(
        params, cfg, opt_cfg,
        lambda step, rng: batcher.batch(batch_size, rng),
        seed=seed, halt_on_divergence=run["train.halt_on_divergence"],
    )

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out_dir / "checkpoint", result.params, cfg,
                    opt_state=result.opt_state, step=result.final_step)
    save_log(result.rows, out_dir / "loss.csv")
    (out_dir / "effective_config.txt").write_text(run.render() + "\n")
    print(f"tuned on {len(packed.sequences)} packed rows for {result.final_step} steps")
    return EXIT_DIVERGED if result.diverged else EXIT_OK


def cmd_generate(run: RunConfig, args) -> int:
    print(run.render())
    tok, book, vocab = _load_tokenizer_dir(args.tokenizer_dir)
    params, cfg, _, _ = load_checkpoint(args.checkpoint)
    size = run["tokenizer.image_size"]

    try:
        policy = DecodePolicy(
            block_len=book.tokens_per_image(size, size),
            mode=run["generate.mode"],
            max_new_tokens=run["generate.max_new_tokens"],
            temperature=run["generate.temperature"],
            seed=_seed(run),
        )
    except ValueError as e:
        raise ConfigError(str(e)) from e

    prompt = [vocab.bos] + tok.encode(args.prompt)
    if run["generate.append_sep"]:
        # instruction-tuned checkpoints saw prompt SEP answer during training
        prompt.append(vocab.sep)
    fin = None
    for event in generate_stream(params, cfg, prompt, policy, vocab):
        if isinstance(event, Finished):
            fin = event
    parts = detokenize_mixed(fin.tokens, tok, book, vocab, image_size=size)

    manifest = []
    out_dir = Path(args.out_dir) if args.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    for i, (kind, payload) in enumerate(parts):
        if kind == "text":
            print(payload)
            if out_dir:
                name = f"{i:03d}_text.txt"
                (out_dir / name).write_text(payload, encoding="utf-8")
                manifest.append(f"{i:03d} text {name}")
        else:
            if out_dir:
                name = f"{i:03d}_image.pgm" if payload.ndim == 2 else f"{i:03d}_image.ppm"
                write_pixmap(out_dir / name, to_uint8(payload))
                manifest.append(f"{i:03d} image {name}")
            else:
                print(f"[image {payload.shape[0]}x{payload.shape[1]}]")
    if out_dir:
        (out_dir / "manifest.txt").write_text("\n".join(manifest) + "\n")
        print(f"wrote {len(parts)} parts to {out_dir} (reason: {fin.reason})")
    return EXIT_OK


def cmd_eval(run: RunConfig, args) -> int:
    print(run.render())
    if not args.judgments and not args.annotations:
        raise ConfigError("eval needs --judgments and/or --annotations")
    seed = _seed(run)

    if args.judgments:
        judgments = load_judgments(args.judgments)
        summary = summarize_judgments(judgments)
        print(format_summary_table(summary))
        ci = bootstrap_ci(judgments, judgment_win_rate, n_boot=args.bootstrap, seed=seed)
        print(
            f"overall win rate {100 * summary['overall'].rate:.1f}% "
            f"[{100 * ci.low:.1f}%, {100 * ci.high:.1f}%] "
            f"({ci.n_used} resamples, {ci.skipped} skipped)"
        )

    if args.annotations:
        ratings = load_annotations(args.annotations)
        alpha = krippendorff_alpha(ratings)
        by_item: dict[str, list] = {}
        for item, annotator, label in ratings:
            by_item.setdefault(item, []).append((annotator, label))
        items = list(by_item.values())

        def alpha_stat(sample):
            triples = [
                (i, annotator, label)
                for i, ratings_i in enumerate(sample)
                for annotator, label in ratings_i
            ]
            return krippendorff_alpha(triples)

        ci = bootstrap_ci(items, alpha_stat, n_boot=args.bootstrap, seed=seed)
        print(
            f"krippendorff alpha {alpha:.3f} [{ci.low:.3f}, {ci.high:.3f}] "
            f"({ci.n_used} resamples, {ci.skipped} skipped)"
        )
    return EXIT_OK


def cmd_monitor_report(run: RunConfig, args) -> int:
    print(run.render())
    rows = load_log(args.log)
    if not rows:
        raise ValueError(f"no rows in {args.log}")
    monitor = DivergenceMonitor()
    for row in rows:
        monitor.update(row["output_rms"])
    first, last = rows[0], rows[-1]
    print(f"steps: {len(rows)} ({first['step']}..{last['step']})")
    print(f"output rms: {first['output_rms']:.4f} -> {last['output_rms']:.4f}")
    print(f"smoothed log-rms: {monitor.ewma:.6f}")
    if monitor.diverged:
        print(f"DIVERGED at step offset {monitor.diverged_at}")
        return EXIT_DIVERGED
    print("no divergence detected")
    return EXIT_OK


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key-value configuration file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one configuration key")
    common.add_argument("--seed", type=int, help=f"run seed (falls back to ${SEED_ENV})")

    parser = argparse.ArgumentParser(
        prog="chamtoy",
        description="desk-scale mixed-modal transformer",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tokenizer-train", parents=[common],
                       help="fit the text tokenizer and image codebook")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_tokenizer_train)

    p = sub.add_parser("train", parents=[common], help="pre-train on the mixed corpus")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--tokenizer-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--ablate", choices=["qknorm"],
                   help="train paired runs toggling one stability knob")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sft", parents=[common], help="instruction-tune a checkpoint")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--tokenizer-dir", required=True)
    p.add_argument("--init", required=True, help="pre-trained checkpoint directory")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_sft)

    p = sub.add_parser("generate", parents=[common], help="sample from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokenizer-dir", required=True)
    p.add_argument("--prompt", default="")
    p.add_argument("--out-dir", help="write text parts and pixmap images here")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", parents=[common], help="score judgments and agreement")
    p.add_argument("--judgments", help="item_id,result,category,modality csv")
    p.add_argument("--annotations", help="item_id,annotator_id,label csv")
    p.add_argument("--bootstrap", type=int, default=1000)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("monitor-report", parents=[common],
                       help="re-run the divergence monitor over a training log")
    p.add_argument("--log", required=True, help="loss.csv from a training run")
    p.set_defaults(func=cmd_monitor_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else EXIT_OK
    try:
        run = make_run_config(args)
        return args.func(run, args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
