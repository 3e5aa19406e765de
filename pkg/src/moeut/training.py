"""Autoregressive language-model training on small corpora.

Everything random (initialization and batch sampling) draws from one
``numpy.random.Generator`` stored in the train state, so a run is a pure
function of its seed and checkpoints resume bit-exactly.
"""

from __future__ import annotations

import json
import logging
import math
import os
import zlib
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import tensor as T
from .config import ConfigError, ModelConfig
from .model import MoEUT, lm_loss

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "moeut-checkpoint"
CHECKPOINT_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"


class CheckpointError(RuntimeError):
    """Checkpoint is missing, corrupt, or from an incompatible version."""


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    context_length: int = 256
    steps: int = 500
    lr_peak: float = 2.5e-4
    warmup_steps: int = 0
    clip_norm: float = 0.25
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    min_lr_ratio: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.lr_peak <= 0:
            raise ConfigError("lr_peak must be positive")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be positive")
        if self.steps < self.warmup_steps:
            raise ConfigError(f"steps={self.steps} is shorter than warmup_steps={self.warmup_steps}")
        if self.batch_size < 1 or self.context_length < 1:
            raise ConfigError("batch_size and context_length must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------- text

class Vocabulary:
    """Token string <-> id mapping.

    ``Vocabulary.bytes()`` maps each UTF-8 byte to its value.  A vocabulary
    file lists one token per line with id = line number; text is encoded by
    greedy longest match.
    """

    def __init__(self, tokens: Optional[list[str]] = None):
        self.mode = "bytes" if tokens is None else "file"
        self.tokens = tokens
        if tokens is not None:
            self._ids = {t: i for i, t in enumerate(tokens)}
            self._max_len = max(len(t) for t in tokens)

    @classmethod
    def bytes(cls) -> "Vocabulary":
        return cls(None)

    @classmethod
    def from_file(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f]
        tokens = [t.replace("\\n", "\n") for t in tokens]
        if not tokens:
            raise ConfigError(f"empty vocabulary file {path}")
        return cls(tokens)

    def __len__(self) -> int:
        return 256 if self.tokens is None else len(self.tokens)

    def encode(self, text: str) -> np.ndarray:
        if self.tokens is None:
            return np.frombuffer(text.encode("utf-8"), dtype=np.uint8).astype(np.int64)
        out, i = [], 0
        while i < len(text):
            for n in range(min(self._max_len, len(text) - i), 0, -1):
                tid = self._ids.get(text[i:i + n])
                if tid is not None:
                    out.append(tid)
                    i += n
                    break
            else:
                raise ValueError(f"no vocabulary token matches text at offset {i}: {text[i:i + 10]!r}")
        return np.asarray(out, dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> str:
        if self.tokens is None:
            return bytes(int(i) for i in ids).decode("utf-8", errors="replace")
        return "".join(self.tokens[int(i)] for i in ids)


def read_corpus(path) -> str:
    """UTF-8 text of a file, or of all files under a directory in sorted order."""
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.rglob("*") if p.is_file())
        return "\n".join(p.read_text(encoding="utf-8") for p in files)
    if not path.is_file():
        raise FileNotFoundError(f"corpus not found: {path}")
    return path.read_text(encoding="utf-8")


SUBJECTS = ["the cat", "a dog", "my bird", "the old fox", "one small mouse", "her horse"]
VERBS = ["sees", "eats", "likes", "chases", "finds", "hears"]
OBJECTS = ["the ball", "a fish", "some seeds", "the red box", "a cold stone", "the moon"]
ADVERBS = ["", " today", " again", " slowly", " at night"]


def regular_grammar_corpus(n_bytes: int, seed: int = 0) -> str:
    """Text from a small finite-state grammar: subject verb object [adverb] (and ...)."""
    rng = np.random.default_rng(seed)
    parts, size = [], 0
    while size < n_bytes:
        s = f"{SUBJECTS[rng.integers(len(SUBJECTS))]} {VERBS[rng.integers(len(VERBS))]} " \
            f"{OBJECTS[rng.integers(len(OBJECTS))]}{ADVERBS[rng.integers(len(ADVERBS))]}"
        if rng.random() < 0.3:
            s += f" and {VERBS[rng.integers(len(VERBS))]} {OBJECTS[rng.integers(len(OBJECTS))]}"
        s += ".\n" if rng.random() < 0.2 else ". "
        parts.append(s)
        size += len(s)
    return "".join(parts)[:n_bytes]


def unigram_entropy(tokens: np.ndarray) -> float:
    """Entropy (nats) of the empirical token distribution."""
    _, c = np.unique(np.asarray(tokens), return_counts=True)
    p = c / c.sum()
    return float(-(p * np.log(p)).sum())


def sample_batch(data: np.ndarray, batch_size: int, context: int, rng: np.random.Generator):
    if len(data) < context + 1:
        raise ValueError(f"corpus of {len(data)} tokens is shorter than context+1={context + 1}")
    starts = rng.integers(0, len(data) - context, size=batch_size)
    idx = starts[:, None] + np.arange(context + 1)[None, :]
    window = data[idx]
    return window[:, :-1], window[:, 1:]


# ---------------------------------------------------------------- optimization

def lr_schedule(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``lr_peak``, then cosine decay to ``min_lr_ratio * lr_peak``."""
    peak, warm, total = cfg.lr_peak, cfg.warmup_steps, cfg.steps
    if warm and step < warm:
        return peak * step / warm
    if total <= warm:
        return peak
    progress = min(1.0, (step - warm) / (total - warm))
    low = peak * cfg.min_lr_ratio
    return low + (peak - low) * 0.5 * (1.0 + math.cos(math.pi * progress))


def clip_gradients(grads: dict, max_norm: float) -> float:
    """Scale gradients in place so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    norm = T.global_norm(grads.values())
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = (grads[k] * scale).astype(grads[k].dtype)
    return norm


def decays(name: str, t: T.Tensor) -> bool:
    return t.ndim >= 2


@dataclass
class TrainState:
    model: MoEUT
    train_cfg: TrainConfig
    rng: np.random.Generator
    step: int = 0
    adam_m: dict = None
    adam_v: dict = None

    def __post_init__(self):
        params = self.model.parameters()
        if self.adam_m is None:
            self.adam_m = {k: np.zeros_like(p.data) for k, p in params.items()}
        if self.adam_v is None:
            self.adam_v = {k: np.zeros_like(p.data) for k, p in params.items()}

    @classmethod
    def create(cls, model_cfg: ModelConfig, train_cfg: TrainConfig) -> "TrainState":
        rng = np.random.default_rng(train_cfg.seed)
        return cls(MoEUT(model_cfg, rng), train_cfg, rng)


def adamw_update(state: TrainState, grads: dict, lr: float) -> None:
    cfg = state.train_cfg
    b1, b2 = cfg.beta1, cfg.beta2
    t = state.step + 1
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in state.model.parameters().items():
        g = grads[name]
        m = state.adam_m[name]
        v = state.adam_v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if cfg.weight_decay and decays(name, p):
            p.data *= p.dtype.type(1.0 - lr * cfg.weight_decay)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(p.dtype)


def train_step(state: TrainState, inputs: np.ndarray, targets: np.ndarray) -> dict:
    """One optimizer update on a batch; mutates ``state`` and returns step metrics."""
    model = state.model
    model.zero_grad()
    with T.Graph() as g:
        terms, _ = lm_loss(model, inputs, targets)
    loss = terms.total.item()
    if not math.isfinite(loss):
        raise T.NumericError(f"non-finite loss {loss} at step {state.step}")
    g.backward(terms.total)
    params = model.parameters()
    grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}
    grad_norm = clip_gradients(grads, state.train_cfg.clip_norm)
    lr = lr_schedule(state.step + 1, state.train_cfg)
    adamw_update(state, grads, lr)
    state.step += 1
    return {
        "step": state.step,
        "loss": loss,
        "ce": terms.ce.item(),
        "l_ffn": terms.l_ffn.item() if terms.l_ffn is not None else 0.0,
        "l_att": terms.l_att.item() if terms.l_att is not None else 0.0,
        "lr": lr,
        "grad_norm": grad_norm,
    }


def train(state: TrainState, data: np.ndarray, steps: Optional[int] = None,
          metrics_path=None, log_every: int = 50) -> list[dict]:
    """Run ``steps`` updates (default: until ``train_cfg.steps``), appending metrics as JSON lines."""
    cfg = state.train_cfg
    if steps is None:
        steps = cfg.steps - state.step
    data = np.asarray(data)
    history = []
    fh = open(metrics_path, "a", encoding="utf-8") if metrics_path else None
    try:
        for _ in range(steps):
            x, y = sample_batch(data, cfg.batch_size, cfg.context_length, state.rng)
            m = train_step(state, x, y)
            history.append(m)
            if fh:
                fh.write(json.dumps(m) + "\n")
                fh.flush()
            if log_every and m["step"] % log_every == 0:
                log.info("step %d loss %.4f ce %.4f lr %.3g gnorm %.3g", m["step"], m["loss"],
                         m["ce"], m["lr"], m["grad_norm"])
    finally:
        if fh:
            fh.close()
    return history


def evaluate_perplexity(model: MoEUT, data: np.ndarray, context_length: Optional[int] = None,
                        batch_size: int = 8) -> float:
    """exp of mean next-token cross entropy over non-overlapping windows."""
    data = np.asarray(data)
    if len(data) < 2:
        raise ValueError("evaluation corpus needs at least two tokens")
    ctx = context_length or model.cfg.context_length
    windows = [(s, min(s + ctx, len(data) - 1)) for s in range(0, len(data) - 1, ctx)]
    total, count = 0.0, 0
    full = [w for w in windows if w[1] - w[0] == ctx]
    rest = [w for w in windows if w[1] - w[0] != ctx]
    for i in range(0, len(full), batch_size):
        chunk = full[i:i + batch_size]
        x = np.stack([data[a:b] for a, b in chunk])
        y = np.stack([data[a + 1:b + 1] for a, b in chunk])
        total += _sum_ce(model, x, y)
        count += y.size
    for a, b in rest:
        total += _sum_ce(model, data[a:b][None], data[a + 1:b + 1][None])
        count += b - a
    return math.exp(total / count)


def _sum_ce(model: MoEUT, x: np.ndarray, y: np.ndarray) -> float:
    logits = model.forward(x).logits.data.astype(np.float64).reshape(-1, model.cfg.vocab_size)
    m = logits.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=-1))
    return float((lse - logits[np.arange(len(lse)), y.reshape(-1)]).sum())


# ---------------------------------------------------------------- checkpoints

def _tensor_groups(state: TrainState) -> list[tuple[str, dict]]:
    return [("param", {k: p.data for k, p in state.model.parameters().items()}),
            ("adam_m", state.adam_m), ("adam_v", state.adam_v)]


def save_checkpoint(state: TrainState, path) -> Path:
    """Write ``manifest.json`` and a little-endian float32 ``tensors.bin`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index, chunks, offset = [], [], 0
    for group, arrays in _tensor_groups(state):
        for name, a in arrays.items():
            if a.dtype != np.float32:
                raise CheckpointError(f"checkpoints store float32 only; {group}/{name} is {a.dtype}")
            raw = a.astype("<f4").tobytes()
            index.append({"name": f"{group}/{name}", "shape": list(a.shape), "offset": offset,
                          "nbytes": len(raw), "crc32": zlib.crc32(raw)})
            chunks.append(raw)
            offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_config": state.model.cfg.to_dict(),
        "train_config": state.train_cfg.to_dict(),
        "step": state.step,
        "rng_state": state.rng.bit_generator.state,
        "blob": BLOB,
        "blob_bytes": len(blob),
        "blob_crc32": zlib.crc32(blob),
        "tensors": index,
    }
    tmp_blob = path / (BLOB + ".tmp")
    tmp_blob.write_bytes(blob)
    os.replace(tmp_blob, path / BLOB)
    tmp_man = path / (MANIFEST + ".tmp")
    tmp_man.write_text(json.dumps(manifest, indent=1), encoding="utf-8")
    os.replace(tmp_man, path / MANIFEST)
    return path


def load_checkpoint(path) -> TrainState:
    """Restore a :class:`TrainState`; the blob is fully verified before anything is built."""
    path = Path(path)
    man_path = path / MANIFEST
    if not man_path.is_file():
        raise CheckpointError(f"no checkpoint manifest at {man_path}")
    try:
        manifest = json.loads(man_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt manifest: {e}") from None
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"not a checkpoint manifest: {man_path}")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {manifest.get('version')} is not supported "
                              f"(expected {CHECKPOINT_VERSION})")
    blob_path = path / manifest["blob"]
    if not blob_path.is_file():
        raise CheckpointError(f"missing tensor blob {blob_path}")
    blob = blob_path.read_bytes()
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"tensor blob has {len(blob)} bytes, manifest says {manifest['blob_bytes']}")
    if zlib.crc32(blob) != manifest["blob_crc32"]:
        raise CheckpointError("tensor blob checksum mismatch")
    arrays: dict[str, dict] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for entry in manifest["tensors"]:
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"] or zlib.crc32(raw) != entry["crc32"]:
            raise CheckpointError(f"checksum mismatch for tensor {entry['name']}")
        group, name = entry["name"].split("/", 1)
        arrays[group][name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(entry["shape"])
    model_cfg = ModelConfig.from_dict(manifest["model_config"])
    train_cfg = TrainConfig.from_dict(manifest["train_config"])
    rng = np.random.default_rng()
    rng.bit_generator.state = manifest["rng_state"]
    model = MoEUT(model_cfg, np.random.default_rng(0))
    model.load_arrays(arrays["param"])
    return TrainState(model, train_cfg, rng, manifest["step"],
                      {k: v.copy() for k, v in arrays["adam_m"].items()},
                      {k: v.copy() for k, v in arrays["adam_v"].items()})


def with_steps(cfg: TrainConfig, steps: int) -> TrainConfig:
    return replace(cfg, steps=steps)
