"""Command-line entry point: ``moeut <subcommand> [options]``.

Subcommands: train, eval, analyze, count-params, count-macs, derive-config.

Configuration is resolved as defaults < ``--config`` file < ``--set`` overrides.
A config file is either flat (keys of the model and/or train config) or has
``"model"`` and ``"train"`` sections.  ``--set key=value`` accepts bare keys,
which apply to every section that defines them, or ``model.key`` /
``train.key``.  Every run writes ``resolved_config.json`` into ``--out``.

Exit codes: 0 success, 1 configuration or input error, 2 runtime or numeric
error.  ``MOEUT_LOG`` sets the log level (default INFO).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from contextlib import nullcontext
from dataclasses import fields
from pathlib import Path

from . import tensor as T
from .accounting import (DenseSpec, attention_share, build_config_from_dense, mac_breakdown,
                         param_breakdown)
from .analysis import trace_corpus, write_metrics, write_residual_norms, SelectionTrace
from .config import ConfigError, ModelConfig, coerce, load_json, preset
from .training import (CheckpointError, TrainConfig, TrainState, Vocabulary, evaluate_perplexity,
                       load_checkpoint, read_corpus, regular_grammar_corpus, save_checkpoint, train,
                       with_steps)

log = logging.getLogger("moeut")

SECTIONS = {"model": ModelConfig, "train": TrainConfig}
SYNTHETIC_BYTES = 1_000_000


class UsageError(ConfigError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- config resolution

def _keys(cls) -> set:
    return {f.name for f in fields(cls)}


def _route(key: str) -> list[tuple[str, str]]:
    """(section, field) pairs a possibly dotted key refers to."""
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r} in {key!r}")
        if name not in _keys(SECTIONS[section]):
            raise ConfigError(f"unknown config key {key!r}")
        return [(section, name)]
    hits = [(s, key) for s, cls in SECTIONS.items() if key in _keys(cls)]
    if not hits:
        raise ConfigError(f"unknown config key {key!r}")
    return hits


def resolve(config_path=None, overrides=(), seed=None, base_model: dict | None = None,
            base_train: dict | None = None) -> tuple[ModelConfig, TrainConfig]:
    values = {"model": dict(base_model or {}), "train": dict(base_train or {})}
    if config_path:
        raw = load_json(config_path)
        if set(raw) <= set(SECTIONS) and raw:
            for section, d in raw.items():
                if not isinstance(d, dict):
                    raise ConfigError(f"section {section!r} must be an object")
                for k, v in d.items():
                    for s, name in _route(f"{section}.{k}"):
                        values[s][name] = v
        else:
            for k, v in raw.items():
                for s, name in _route(k):
                    values[s][name] = v
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        for s, name in _route(key.strip()):
            values[s][name] = coerce(SECTIONS[s], name, value.strip())
    if seed is not None:
        values["train"]["seed"] = seed
    model = ModelConfig.from_dict(values["model"])
    return model, TrainConfig.from_dict(values["train"])


def write_resolved(out: Path, model_cfg: ModelConfig | None, train_cfg: TrainConfig | None,
                   extra: dict | None = None) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    snap = {}
    if model_cfg is not None:
        snap["model"] = model_cfg.to_dict()
    if train_cfg is not None:
        snap["train"] = train_cfg.to_dict()
    snap.update(extra or {})
    path = out / "resolved_config.json"
    path.write_text(json.dumps(snap, indent=2) + "\n", encoding="utf-8")
    return path


# ---------------------------------------------------------------- data

def load_tokens(args, vocab_size: int):
    """Token ids of ``--corpus`` (or the built-in synthetic grammar corpus)."""
    vocab = Vocabulary.from_file(args.vocab) if args.vocab else Vocabulary.bytes()
    if len(vocab) > vocab_size:
        raise ConfigError(f"vocabulary has {len(vocab)} tokens but vocab_size={vocab_size}")
    if args.corpus:
        try:
            text = read_corpus(args.corpus)
        except FileNotFoundError as e:
            raise ConfigError(str(e)) from None
        source = str(args.corpus)
    else:
        text = regular_grammar_corpus(args.synthetic_bytes, seed=args.corpus_seed)
        source = f"synthetic grammar ({args.synthetic_bytes} bytes, seed {args.corpus_seed})"
    return vocab.encode(text), source


def split(tokens, holdout: float):
    n = int(len(tokens) * (1.0 - holdout))
    return tokens[:n], tokens[n:]


# ---------------------------------------------------------------- subcommands

def cmd_train(args) -> int:
    out = Path(args.out)
    if args.resume:
        state = load_checkpoint(args.resume)
        model_cfg = state.model.cfg
        train_cfg = state.train_cfg
        if args.steps is not None:
            train_cfg = with_steps(train_cfg, args.steps)
            state.train_cfg = train_cfg
    else:
        model_cfg, train_cfg = resolve(args.config, args.set, args.seed)
        if args.steps is not None:
            train_cfg = with_steps(train_cfg, args.steps)
        state = None
    if train_cfg.context_length > model_cfg.context_length:
        raise ConfigError(f"train context {train_cfg.context_length} exceeds model context "
                          f"{model_cfg.context_length}")
    print(f"seed: {train_cfg.seed}")
    tokens, source = load_tokens(args, model_cfg.vocab_size)
    train_tokens, held_out = split(tokens, args.holdout)
    write_resolved(out, model_cfg, train_cfg, {"corpus": source, "holdout": args.holdout})
    if state is None:
        state = TrainState.create(model_cfg, train_cfg)
    log.info("training %d parameters for %d steps on %s", state.model.n_params(),
             train_cfg.steps - state.step, source)
    history = train(state, train_tokens, metrics_path=out / "metrics.jsonl", log_every=args.log_every)
    ckpt = save_checkpoint(state, out / "checkpoint")
    if history:
        print(f"final loss: {history[-1]['loss']:.4f}")
    if len(held_out) > 1:
        ppl = evaluate_perplexity(state.model, held_out, train_cfg.context_length)
        print(f"held-out perplexity: {ppl:.4f}")
    if args.trace:
        trace = trace_corpus(state.model, held_out, train_cfg.context_length,
                             members=_trace_members(state.model, args))
        trace.to_jsonl(out / "trace.jsonl")
    print(f"checkpoint: {ckpt}")
    return 0


def _trace_members(model, args):
    return tuple(range(model.cfg.group_size)) if args.all_members else (0,)


def cmd_eval(args) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    state = load_checkpoint(args.checkpoint)
    model = state.model
    out = Path(args.out)
    print(f"seed: {state.train_cfg.seed}")
    tokens, source = load_tokens(args, model.cfg.vocab_size)
    _, held_out = split(tokens, args.holdout) if not args.corpus else (None, tokens)
    if args.max_tokens:
        held_out = held_out[:args.max_tokens]
    write_resolved(out, model.cfg, state.train_cfg,
                   {"checkpoint": str(args.checkpoint), "corpus": source})
    ctx = args.seq_len or state.train_cfg.context_length
    ppl = evaluate_perplexity(model, held_out, ctx)
    print(f"perplexity: {ppl:.6f}")
    if args.trace:
        trace = trace_corpus(model, held_out, ctx, members=_trace_members(model, args))
        trace.to_jsonl(out / "trace.jsonl")
        print(f"trace: {out / 'trace.jsonl'} ({len(trace)} records)")
    return 0


def cmd_analyze(args) -> int:
    out = Path(args.out)
    model = None
    if args.trace_file:
        if not Path(args.trace_file).is_file():
            raise ConfigError(f"trace file not found: {args.trace_file}")
        trace = SelectionTrace.from_jsonl(args.trace_file)
        n_experts = args.n_experts
        write_resolved(out, None, None, {"trace_file": str(args.trace_file)})
    elif args.checkpoint:
        state = load_checkpoint(args.checkpoint)
        model = state.model
        print(f"seed: {state.train_cfg.seed}")
        tokens, source = load_tokens(args, model.cfg.vocab_size)
        _, held_out = split(tokens, args.holdout) if not args.corpus else (None, tokens)
        ctx = args.seq_len or state.train_cfg.context_length
        trace = trace_corpus(model, held_out, ctx, members=_trace_members(model, args),
                             max_tokens=args.max_tokens)
        n_experts = args.n_experts or model.cfg.n_experts
        write_resolved(out, model.cfg, state.train_cfg,
                       {"checkpoint": str(args.checkpoint), "corpus": source})
        trace.to_jsonl(out / "trace.jsonl")
    else:
        raise ConfigError("analyze needs --trace-file or --checkpoint")
    paths = write_metrics(trace, out, n_experts=n_experts, token_cap=args.token_cap)
    if model is not None:
        sample = held_out[:min(len(held_out), ctx * 8)]
        n = len(sample) // ctx
        norms = model.forward(sample[:n * ctx].reshape(n, ctx), record_residuals=True).residual_norms
        paths.append(write_residual_norms(norms, out / "residual_norms.csv"))
    print(f"{len(trace)} trace records")
    for p in paths:
        print(f"wrote {p}")
    return 0


def _model_for_counting(args) -> ModelConfig:
    if args.preset:
        base = preset(args.preset).to_dict()
        model_cfg, _ = resolve(args.config, args.set, base_model=base)
    else:
        model_cfg, _ = resolve(args.config, args.set)
    return model_cfg


def cmd_count_params(args) -> int:
    cfg = _model_for_counting(args)
    b = param_breakdown(cfg)
    write_resolved(Path(args.out), cfg, None, {"params": b})
    for k, v in b.items():
        if k != "total":
            print(f"{k:<14}{v:>16,}")
    print(f"{'total':<14}{b['total']:>16,}")
    if cfg.block == "moe":
        print(f"attention share of non-embedding params: {attention_share(cfg):.3f}")
    return 0


def cmd_count_macs(args) -> int:
    cfg = _model_for_counting(args)
    seq = args.seq_len or cfg.context_length
    b = mac_breakdown(cfg, seq)
    write_resolved(Path(args.out), cfg, None, {"seq_len": seq, "macs": b})
    print(f"forward MACs for one sequence of {seq} tokens")
    for k, v in b.items():
        if k != "total":
            print(f"{k:<18}{v:>20,}")
    print(f"{'total':<18}{b['total']:>20,}")
    print(f"{'per token':<18}{b['total'] / max(seq, 1):>20,.0f}")
    return 0


DENSE_ALIASES = {"H": "n_heads", "heads": "n_heads", "L": "n_layers", "d": "d_model"}


def parse_dense(text: str) -> DenseSpec:
    vals = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        if "=" not in item:
            raise ConfigError(f"--dense entry {item!r} is not key=value")
        k, v = item.split("=", 1)
        k = DENSE_ALIASES.get(k.strip(), k.strip())
        if k not in _keys(DenseSpec):
            raise ConfigError(f"unknown --dense key {k!r}")
        try:
            vals[k] = int(float(v))
        except ValueError:
            raise ConfigError(f"--dense {k}={v!r} is not a number") from None
    for k in ("d_model", "n_layers", "n_heads"):
        if k not in vals:
            raise ConfigError(f"--dense needs {k}")
    vals.setdefault("d_head", vals["d_model"] // vals["n_heads"])
    return DenseSpec(**vals)


def cmd_derive_config(args) -> int:
    if not args.dense:
        raise ConfigError("derive-config needs --dense")
    dense = parse_dense(args.dense)
    cfg = build_config_from_dense(dense, args.target_params, prefer_table=not args.no_table)
    out = Path(args.out)
    write_resolved(out, cfg, None, {"dense": dense.__dict__, "target_params": args.target_params})
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2) + "\n", encoding="utf-8")
    print(json.dumps(cfg.to_dict(), indent=2))
    b = param_breakdown(cfg)
    print(f"total params: {b['total']:,}  attention share: {attention_share(cfg):.3f}",
          file=sys.stderr)
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "count-params": cmd_count_params,
    "count-macs": cmd_count_macs,
    "derive-config": cmd_derive_config,
}


# ---------------------------------------------------------------- argument parsing

def build_parser() -> argparse.ArgumentParser:
    common = Parser(add_help=False)
    common.add_argument("--config", help="JSON config file (flat or with model/train sections)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value; repeatable; model./train. prefixes allowed")
    common.add_argument("--out", help="output directory (default: runs/<subcommand>)")
    common.add_argument("--seed", type=int, help="seed for initialization and batch sampling")
    common.add_argument("--trace", action="store_true", help="record feedforward routing traces")
    common.add_argument("--all-members", action="store_true",
                        help="trace every group member instead of the first")
    common.add_argument("--device-threads", type=int, metavar="N", help="limit BLAS threads")

    data = Parser(add_help=False)
    data.add_argument("--corpus", help="UTF-8 text file or directory (default: synthetic grammar)")
    data.add_argument("--vocab", help="vocabulary file, one token per line (default: bytes)")
    data.add_argument("--synthetic-bytes", type=int, default=SYNTHETIC_BYTES)
    data.add_argument("--corpus-seed", type=int, default=0)
    data.add_argument("--holdout", type=float, default=0.05,
                      help="fraction of the corpus tail held out for evaluation")
    data.add_argument("--max-tokens", type=int)
    data.add_argument("--seq-len", type=int)

    counting = Parser(add_help=False)
    counting.add_argument("--preset", help="named published configuration, e.g. moeut_243M")

    p = Parser(prog="moeut", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    t = sub.add_parser("train", parents=[common, data], help="train a model")
    t.add_argument("--steps", type=int, help="total optimizer steps (overrides train.steps)")
    t.add_argument("--resume", help="checkpoint directory to continue from")
    t.add_argument("--log-every", type=int, default=50)

    e = sub.add_parser("eval", parents=[common, data], help="held-out perplexity of a checkpoint")
    e.add_argument("--checkpoint")

    a = sub.add_parser("analyze", parents=[common, data], help="routing statistics as CSV")
    a.add_argument("--checkpoint")
    a.add_argument("--trace-file")
    a.add_argument("--n-experts", type=int)
    a.add_argument("--token-cap", type=int)

    sub.add_parser("count-params", parents=[common, counting], help="parameter breakdown")
    m = sub.add_parser("count-macs", parents=[common, counting], help="forward MAC breakdown")
    m.add_argument("--seq-len", type=int)

    d = sub.add_parser("derive-config", parents=[common], help="MoEUT config from a dense baseline")
    d.add_argument("--dense", help="e.g. d_model=1024,n_layers=18,H=16,d_head=64")
    d.add_argument("--target-params", type=float)
    d.add_argument("--no-table", action="store_true",
                   help="always solve for expert counts instead of using published rows")
    return p


def _setup_logging() -> None:
    level = getattr(logging, os.environ.get("MOEUT_LOG", "INFO").upper(), None)
    if not isinstance(level, int):
        level = logging.INFO
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr, force=True)


def _thread_limit(n):
    if n is None:
        return nullcontext()
    if n < 1:
        raise ConfigError("--device-threads must be at least 1")
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def run(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        if args.out is None:
            args.out = str(Path("runs") / args.command)
        with _thread_limit(args.device_threads):
            return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (T.NumericError, CheckpointError, T.ShapeError, T.GraphLifecycleError, ValueError,
            OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
