"""Expert-usage diagnostics computed from recorded feedforward routing decisions.

A :class:`SelectionTrace` holds one record per (sequence, layer step,
position) with the token id and the sorted set of chosen experts.  Traces
round-trip through JSON-lines files; every metric here also has a CSV writer
with a fixed header row.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

FIELDS = ("seq", "layer_step", "member", "position", "token_id")


class SelectionTrace:
    """Columnar store of routing records.

    Columns are int64 arrays of equal length; ``experts`` is (N, K) with each
    row sorted ascending.
    """

    def __init__(self, k: Optional[int] = None):
        self.k = k
        self._chunks: list[dict] = []
        self._cache: Optional[dict] = None

    def add(self, *, layer_step: int, member: int, tokens: np.ndarray, experts: np.ndarray,
            seq_offset: int = 0) -> None:
        """Append a (B, T) block of tokens and their (B, T, K) expert choices."""
        tokens = np.atleast_2d(np.asarray(tokens))
        experts = np.asarray(experts).reshape(tokens.shape + (-1,))
        b, t = tokens.shape
        if self.k is None:
            self.k = experts.shape[-1]
        self._chunks.append({
            "seq": np.repeat(np.arange(seq_offset, seq_offset + b), t),
            "layer_step": np.full(b * t, layer_step),
            "member": np.full(b * t, member),
            "position": np.tile(np.arange(t), b),
            "token_id": tokens.reshape(-1).astype(np.int64),
            "experts": np.sort(experts.reshape(b * t, -1), axis=1).astype(np.int64),
        })
        self._cache = None

    def extend(self, other: "SelectionTrace") -> None:
        if len(other):
            self._chunks.append(other.columns())
            self.k = self.k or other.k
            self._cache = None

    def columns(self) -> dict:
        if self._cache is None:
            if not self._chunks:
                k = self.k or 0
                self._cache = {f: np.zeros(0, np.int64) for f in FIELDS}
                self._cache["experts"] = np.zeros((0, k), np.int64)
            else:
                self._cache = {f: np.concatenate([c[f] for c in self._chunks])
                               for f in FIELDS + ("experts",)}
                self._chunks = [self._cache]
        return self._cache

    def __len__(self) -> int:
        return sum(len(c["seq"]) for c in self._chunks)

    def __getattr__(self, name):
        if name in FIELDS or name == "experts":
            return self.columns()[name]
        raise AttributeError(name)

    @property
    def layer_steps(self) -> np.ndarray:
        return np.unique(self.columns()["layer_step"])

    def select(self, mask: np.ndarray) -> "SelectionTrace":
        out = SelectionTrace(self.k)
        cols = self.columns()
        out._chunks = [{f: v[mask] for f, v in cols.items()}]
        return out

    def records(self) -> Iterator[dict]:
        cols = self.columns()
        for i in range(len(cols["seq"])):
            rec = {f: int(cols[f][i]) for f in FIELDS}
            rec["experts"] = cols["experts"][i].tolist()
            yield rec

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for rec in self.records():
                f.write(json.dumps(rec, separators=(",", ":")) + "\n")

    @classmethod
    def from_records(cls, records) -> "SelectionTrace":
        cols = {f: [] for f in FIELDS}
        experts = []
        for rec in records:
            for f in FIELDS:
                cols[f].append(int(rec.get(f, 0)))
            experts.append(sorted(int(e) for e in rec["experts"]))
        lens = {len(e) for e in experts}
        if len(lens) > 1:
            raise ValueError(f"records disagree on the number of experts: {sorted(lens)}")
        k = lens.pop() if lens else None
        out = cls(k)
        if experts:
            chunk = {f: np.asarray(v, dtype=np.int64) for f, v in cols.items()}
            chunk["experts"] = np.asarray(experts, dtype=np.int64).reshape(len(experts), -1)
            out._chunks = [chunk]
        return out

    @classmethod
    def from_jsonl(cls, path) -> "SelectionTrace":
        def gen():
            with open(path, encoding="utf-8") as f:
                for line in f:
                    if line.strip():
                        yield json.loads(line)

        return cls.from_records(gen())


# ---------------------------------------------------------------- expert x layer usage

@dataclass
class ExpertLayerHistogram:
    """``counts[e, j]`` = activations of expert ``e`` at layer step ``layer_steps[j]``."""

    counts: np.ndarray
    layer_steps: np.ndarray

    def column(self, layer_step: int) -> np.ndarray:
        return self.counts[:, int(np.flatnonzero(self.layer_steps == layer_step)[0])]


def expert_layer_histogram(trace: SelectionTrace, n_experts: Optional[int] = None) -> ExpertLayerHistogram:
    if not len(trace):
        raise ValueError("expert_layer_histogram: empty trace")
    steps = trace.layer_steps
    col = np.searchsorted(steps, trace.layer_step)
    experts = trace.experts
    n_e = int(experts.max()) + 1 if n_experts is None else n_experts
    counts = np.zeros((n_e, len(steps)), dtype=np.int64)
    np.add.at(counts, (experts.reshape(-1), np.repeat(col, experts.shape[1])), 1)
    return ExpertLayerHistogram(counts, steps)


def layer_position_score(hist: ExpertLayerHistogram, expert: int) -> Optional[float]:
    """Activation-weighted mean layer step of ``expert``; ``None`` if it never fired."""
    c = hist.counts[expert]
    total = c.sum()
    if total == 0:
        return None
    return float((c * hist.layer_steps).sum() / total)


def layer_position_scores(hist: ExpertLayerHistogram) -> np.ndarray:
    """Scores for all experts, NaN where an expert was never activated."""
    total = hist.counts.sum(axis=1)
    weighted = (hist.counts * hist.layer_steps[None, :]).sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, weighted / np.maximum(total, 1), np.nan)


def expert_order(hist: ExpertLayerHistogram) -> np.ndarray:
    """Experts sorted by (score, id); never-activated experts go last."""
    s = layer_position_scores(hist)
    ids = np.arange(len(s))
    return np.lexsort((ids, np.where(np.isnan(s), np.inf, s)))


# ---------------------------------------------------------------- per-token diversity

def _token_filter(trace: SelectionTrace, token_cap: Optional[int]) -> Optional[np.ndarray]:
    if token_cap is None:
        return None
    return np.array([t for t, _ in token_frequencies(trace)[:token_cap]], dtype=np.int64)


def token_frequencies(trace: SelectionTrace) -> list[tuple[int, int]]:
    """(token id, number of distinct (seq, position) occurrences), most frequent first."""
    pos_key = trace.seq * (int(trace.position.max(initial=0)) + 1) + trace.position
    pairs = np.unique(np.stack([trace.token_id, pos_key], axis=1), axis=0)
    toks, counts = np.unique(pairs[:, 0], return_counts=True)
    order = np.lexsort((toks, -counts))
    return [(int(toks[i]), int(counts[i])) for i in order]


def token_expert_diversity(trace: SelectionTrace, layer_step: int,
                           token_cap: Optional[int] = None) -> dict[int, int]:
    """Number of distinct experts each token used at ``layer_step`` across all its occurrences."""
    keep = trace.layer_step == layer_step
    allowed = _token_filter(trace, token_cap)
    if allowed is not None:
        keep &= np.isin(trace.token_id, allowed)
    toks = trace.token_id[keep]
    experts = trace.experts[keep]
    pairs = np.unique(np.stack([np.repeat(toks, experts.shape[1]), experts.reshape(-1)], axis=1), axis=0)
    t, c = np.unique(pairs[:, 0], return_counts=True)
    return {int(a): int(b) for a, b in zip(t, c)}


# ---------------------------------------------------------------- per-column overlap

def column_selection_iou(trace: SelectionTrace, n_experts: Optional[int] = None,
                         chunk: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Mean intersection-over-union of expert sets between layer steps of the same column.

    Returns ``(iou, layer_steps)``; ``iou`` is symmetric with unit diagonal.
    Only columns present at both layer steps contribute to an entry.
    """
    steps = trace.layer_steps
    n_l = len(steps)
    n_e = int(trace.experts.max(initial=0)) + 1 if n_experts is None else n_experts
    pos_span = int(trace.position.max(initial=0)) + 1
    col_key = trace.seq * pos_span + trace.position
    cols, col_idx = np.unique(col_key, return_inverse=True)
    step_idx = np.searchsorted(steps, trace.layer_step)
    sums = np.zeros((n_l, n_l))
    counts = np.zeros((n_l, n_l))
    order = np.argsort(col_idx, kind="stable")
    bounds = np.searchsorted(col_idx[order], np.arange(0, len(cols) + chunk, chunk))
    for lo, hi in zip(bounds[:-1], bounds[1:]):
        if lo == hi:
            continue
        rows = order[lo:hi]
        base = col_idx[rows].min()
        n_c = col_idx[rows].max() - base + 1
        ind = np.zeros((n_c, n_l, n_e), dtype=bool)
        present = np.zeros((n_c, n_l), dtype=bool)
        c = col_idx[rows] - base
        s = step_idx[rows]
        present[c, s] = True
        k = trace.experts.shape[1]
        ind[np.repeat(c, k), np.repeat(s, k), trace.experts[rows].reshape(-1)] = True
        indf = ind.astype(np.int32)
        inter = np.einsum("cie,cje->cij", indf, indf)
        size = indf.sum(axis=2)
        union = size[:, :, None] + size[:, None, :] - inter
        both = present[:, :, None] & present[:, None, :]
        with np.errstate(invalid="ignore", divide="ignore"):
            iou = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
        sums += np.where(both, iou, 0).sum(axis=0)
        counts += both.sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    np.fill_diagonal(out, 1.0)
    return out, steps


# ---------------------------------------------------------------- token x layer specialization

@dataclass
class TokenSpecialization:
    token_id: int
    frequency: int
    proportions: dict  # layer step -> fraction of the token's experts used there


def token_layer_specialization(trace: SelectionTrace,
                               token_cap: Optional[int] = None) -> list[TokenSpecialization]:
    """Per token and layer step: experts used at that step over experts used at any step.

    Tokens come out in decreasing frequency order (ties by token id).
    """
    freqs = token_frequencies(trace)
    if token_cap is not None:
        freqs = freqs[:token_cap]
    steps = trace.layer_steps
    k = trace.experts.shape[1]
    tok = np.repeat(trace.token_id, k)
    stp = np.repeat(trace.layer_step, k)
    exp_ = trace.experts.reshape(-1)
    per_step = np.unique(np.stack([tok, stp, exp_], axis=1), axis=0)
    overall = np.unique(per_step[:, [0, 2]], axis=0)
    t_all, n_all = np.unique(overall[:, 0], return_counts=True)
    total = dict(zip(t_all.tolist(), n_all.tolist()))
    ts, n_ts = np.unique(per_step[:, :2], axis=0, return_counts=True)
    used = {(int(a), int(b)): int(c) for (a, b), c in zip(ts, n_ts)}
    out = []
    for t, f in freqs:
        props = {int(s): used.get((t, int(s)), 0) / total[t] for s in steps}
        out.append(TokenSpecialization(t, f, props))
    return out


# ---------------------------------------------------------------- collection

def trace_corpus(model, data: np.ndarray, context_length: Optional[int] = None, batch_size: int = 8,
                 members=(0,), max_tokens: Optional[int] = None) -> SelectionTrace:
    """Route non-overlapping windows of ``data`` through ``model`` and record the choices.

    Window ``i`` becomes sequence id ``i``; a ragged tail window is dropped.
    """
    data = np.asarray(data)
    if max_tokens is not None:
        data = data[:max_tokens]
    ctx = context_length or model.cfg.context_length
    n = len(data) // ctx
    if n == 0:
        raise ValueError(f"need at least {ctx} tokens to trace, got {len(data)}")
    windows = data[:n * ctx].reshape(n, ctx)
    trace = SelectionTrace(model.cfg.expert_k)
    for i in range(0, n, batch_size):
        out = model.forward(windows[i:i + batch_size], trace=True, trace_members=members, seq_offset=i)
        trace.extend(out.trace)
    return trace


# ---------------------------------------------------------------- residual updates

def residual_update_norms(model, tokens) -> np.ndarray:
    """Mean over tokens of the L2 norm of each block's change to the residual."""
    out = model.forward(np.asarray(tokens), record_residuals=True)
    return np.asarray(out.residual_norms)


# ---------------------------------------------------------------- CSV output

def _write(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def write_metrics(trace: SelectionTrace, out_dir, n_experts: Optional[int] = None,
                  token_cap: Optional[int] = None) -> list[Path]:
    """Write every trace metric as CSV into ``out_dir``; returns the written paths.

    Files and headers:
      expert_layer_histogram.csv   expert,layer_step,count
      layer_position_score.csv     rank,expert,score
      token_expert_diversity.csv   layer_step,token_id,unique_experts
      column_iou.csv               layer_step_a,layer_step_b,iou
      token_layer_specialization.csv  rank,token_id,frequency,layer_step,proportion
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    hist = expert_layer_histogram(trace, n_experts)
    paths = []

    p = out_dir / "expert_layer_histogram.csv"
    _write(p, ["expert", "layer_step", "count"],
           ([e, int(s), int(hist.counts[e, j])] for e in range(hist.counts.shape[0])
            for j, s in enumerate(hist.layer_steps)))
    paths.append(p)

    scores = layer_position_scores(hist)
    p = out_dir / "layer_position_score.csv"
    _write(p, ["rank", "expert", "score"],
           ([r, int(e), "" if np.isnan(scores[e]) else f"{scores[e]:.6f}"]
            for r, e in enumerate(expert_order(hist))))
    paths.append(p)

    p = out_dir / "token_expert_diversity.csv"
    rows = []
    for s in hist.layer_steps:
        div = token_expert_diversity(trace, int(s), token_cap)
        rows += [[int(s), t, n] for t, n in sorted(div.items(), key=lambda kv: (kv[1], kv[0]))]
    _write(p, ["layer_step", "token_id", "unique_experts"], rows)
    paths.append(p)

    iou, steps = column_selection_iou(trace, n_experts)
    p = out_dir / "column_iou.csv"
    _write(p, ["layer_step_a", "layer_step_b", "iou"],
           ([int(a), int(b), f"{iou[i, j]:.6f}"] for i, a in enumerate(steps) for j, b in enumerate(steps)))
    paths.append(p)

    p = out_dir / "token_layer_specialization.csv"
    _write(p, ["rank", "token_id", "frequency", "layer_step", "proportion"],
           ([r, ts.token_id, ts.frequency, s, f"{v:.6f}"]
            for r, ts in enumerate(token_layer_specialization(trace, token_cap))
            for s, v in ts.proportions.items()))
    paths.append(p)
    return paths


def write_residual_norms(norms, path) -> Path:
    _write(path, ["layer", "mean_update_norm"], ([i, f"{v:.6g}"] for i, v in enumerate(norms)))
    return Path(path)
