"""Retrieval, generation, and context-identification losses plus the trainer."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .corpus import (AdHocPair, ConvSearch, InstructConv, TrainingExample, adhoc_query,
                     compose_session_query, passage_tokens)
from .errors import ConfigError, DivergenceError, NumericError
from .model import ModelState, embed_batch, session_lm_batch
from .numerics import Tensor
from .vocab import Vocab


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.5
    enable_cii: bool = True
    learning_rate: float = 1e-4
    batch_size: int = 32
    epochs: int = 1
    grad_accum_steps: int = 4
    seed: int = 0
    temperature: float | None = None
    optimizer: str = "sgd"
    momentum: float = 0.0
    clip_norm: float | None = None
    query_budget: int = 64
    passage_budget: int = 32
    max_steps: int | None = None
    # "query": generate from the session query only; "query_passage": items
    # that carry a positive passage generate from query + passage
    gen_input: str = "query"

    def __post_init__(self):
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 for in-batch negatives")
        if self.grad_accum_steps < 1 or self.epochs < 0:
            raise ConfigError("grad_accum_steps must be >= 1 and epochs >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.gen_input not in ("query", "query_passage"):
            raise ConfigError(f"unknown gen_input {self.gen_input!r}")
        if self.temperature is not None and self.temperature <= 0:
            raise ConfigError("temperature must be positive")


@dataclass(frozen=True)
class BatchItem:
    kind: str
    query: tuple[int, ...]
    positive: tuple[int, ...]      # retrieval target: p+, or r+ for instruction data
    target: tuple[int, ...]        # generation target: r+, or p+ for ad-hoc data
    passage: tuple[int, ...] = ()  # p+ on conversational search items
    response: tuple[int, ...] = ()


@dataclass(frozen=True)
class Batch:
    items: tuple[BatchItem, ...]

    def __len__(self) -> int:
        return len(self.items)

    def count(self, kind: str) -> int:
        return sum(1 for it in self.items if it.kind == kind)


def make_item(ex: TrainingExample, vocab: Vocab, passages: Mapping[str, str],
              query_budget: int, passage_budget: int) -> BatchItem:
    def ptoks(text):
        return tuple(passage_tokens(text, passage_budget, vocab))

    if isinstance(ex, AdHocPair):
        q = adhoc_query(ex.query, query_budget, vocab).tokens
        p = ptoks(passages[ex.pos_pid])
        return BatchItem("adhoc", q, p, p)
    q = compose_session_query(ex.session, ex.turn, query_budget, vocab).tokens
    r = ptoks(ex.response)
    if isinstance(ex, InstructConv):
        return BatchItem("instruct", q, r, r)
    if isinstance(ex, ConvSearch):
        p = ptoks(passages[ex.pos_pid])
        return BatchItem("convsearch", q, p, r, passage=p, response=r)
    raise TypeError(f"not a training example: {ex!r}")


def make_batch(examples: Sequence[TrainingExample], vocab: Vocab, passages: Mapping[str, str],
               query_budget: int = 64, passage_budget: int = 32) -> Batch:
    return Batch(tuple(make_item(ex, vocab, passages, query_budget, passage_budget)
                       for ex in examples))


def cii_anchor(query: Sequence[int], passage: Sequence[int], vocab_or_marker) -> list[int]:
    """Query context followed by a passage marker and the passage tokens."""
    marker = vocab_or_marker.passage_id if isinstance(vocab_or_marker, Vocab) else int(vocab_or_marker)
    return list(query) + [marker] + list(passage)


# ---------------------------------------------------------------------------
# losses


def info_nce(anchors: Tensor, candidates: Tensor, temperature: float | None = None) -> Tensor:
    """Mean InfoNCE with the diagonal as positives and other rows as negatives."""
    scores = nx.matmul(anchors, nx.transpose(candidates))
    if temperature is not None:
        scores = nx.scale(scores, 1.0 / temperature)
    return nx.cross_entropy(scores, list(range(anchors.shape[0])))


def retrieval_loss(state: ModelState, batch: Batch, temperature: float | None = None) -> Tensor:
    if len(batch) < 2:
        raise ValueError("retrieval_loss needs at least two items for in-batch negatives")
    q = embed_batch(state, [it.query for it in batch.items])
    p = embed_batch(state, [it.positive for it in batch.items])
    return info_nce(q, p, temperature)


def generation_loss(state: ModelState, batch: Batch, gen_input: str = "query",
                    passage_marker: int | None = None) -> Tensor:
    live = [it for it in batch.items if it.target]
    if not live:
        raise ValueError("generation_loss: every item has an empty target")
    if gen_input == "query_passage":
        contexts = [cii_anchor(it.query, it.passage, passage_marker) if it.passage else it.query
                    for it in live]
    else:
        contexts = [it.query for it in live]
    return session_lm_batch(state, contexts, [it.target for it in live])


def cii_loss(state: ModelState, batch: Batch, passage_marker: int,
             temperature: float | None = None) -> tuple[Tensor, bool]:
    """InfoNCE of (query + positive passage) against in-batch responses.

    Returns ``(loss, active)``; without conversational search items the loss
    is a constant zero and ``active`` is False.
    """
    live = [it for it in batch.items if it.kind == "convsearch"]
    if not live:
        return Tensor(0.0), False
    anchors = embed_batch(state, [cii_anchor(it.query, it.passage, passage_marker) for it in live])
    responses = embed_batch(state, [it.response for it in live])
    return info_nce(anchors, responses, temperature), True


@dataclass
class JointLoss:
    total: Tensor
    l_r: Tensor
    l_g: Tensor
    l_cii: Tensor
    cii_active: bool

    def values(self) -> dict[str, float]:
        return {"l_r": self.l_r.item(), "l_g": self.l_g.item(),
                "l_cii": self.l_cii.item(), "total": self.total.item()}


def cii_used(cfg: LossConfig) -> bool:
    """A zero weight removes the term exactly like the switch does."""
    return cfg.enable_cii and cfg.alpha > 0


def combine(l_r: Tensor, l_g: Tensor, l_cii: Tensor, cfg: LossConfig) -> Tensor:
    if cii_used(cfg):
        return nx.weighted_sum([l_r, l_g, l_cii], [1.0, 1.0, cfg.alpha])
    return nx.weighted_sum([l_r, l_g], [1.0, 1.0])


def joint_loss(state: ModelState, batch: Batch, cfg: LossConfig, passage_marker: int) -> JointLoss:
    l_r = retrieval_loss(state, batch, cfg.temperature)
    l_g = generation_loss(state, batch, cfg.gen_input, passage_marker)
    if cii_used(cfg):
        l_cii, active = cii_loss(state, batch, passage_marker, cfg.temperature)
    else:
        l_cii, active = Tensor(0.0), False
    return JointLoss(combine(l_r, l_g, l_cii, cfg), l_r, l_g, l_cii, active)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    state: ModelState
    log: list[dict] = field(default_factory=list)
    consumed: dict[str, int] = field(default_factory=dict)


class _Optimizer:
    def __init__(self, cfg: LossConfig, params: Mapping[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self.t = 0
        self.m = {k: np.zeros_like(p.values) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.values) for k, p in params.items()} if cfg.optimizer == "adam" else None

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        cfg, lr = self.cfg, self.cfg.learning_rate
        if cfg.clip_norm is not None:
            norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > cfg.clip_norm:
                grads = {k: g * (cfg.clip_norm / norm) for k, g in grads.items()}
        self.t += 1
        for k, p in self.params.items():
            g = grads[k]
            if cfg.optimizer == "sgd":
                if cfg.momentum:
                    self.m[k] = cfg.momentum * self.m[k] + g
                    g = self.m[k]
                p.values -= lr * g
            else:
                b1, b2 = 0.9, 0.999
                self.m[k] = b1 * self.m[k] + (1 - b1) * g
                self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
                mh = self.m[k] / (1 - b1 ** self.t)
                vh = self.v[k] / (1 - b2 ** self.t)
                p.values -= lr * mh / (np.sqrt(vh) + 1e-8)


def batches(stream: Sequence[TrainingExample], batch_size: int) -> list[list[TrainingExample]]:
    """Consecutive chunks; a trailing chunk smaller than two items is dropped."""
    out = [list(stream[i:i + batch_size]) for i in range(0, len(stream), batch_size)]
    return [b for b in out if len(b) >= 2]


def train(cfg: LossConfig, stream: Sequence[TrainingExample], state: ModelState, vocab: Vocab,
          passages: Mapping[str, str], log_path: str | Path | None = None,
          checkpoint_path: str | Path | None = None, progress=None,
          header: dict | None = None) -> TrainResult:
    """Joint fine-tuning over a fixed example order.

    The model is updated in place (pass ``state.copy()`` to keep the
    original). Each log record covers one optimizer update and reports the
    mean of each loss component over its accumulated micro-batches.
    """
    from .model import save_checkpoint

    stream = list(stream)
    if not stream:
        raise ValueError("training stream is empty")
    opt = _Optimizer(cfg, state.params)
    log: list[dict] = []
    consumed = {"adhoc": 0, "instruct": 0, "convsearch": 0}
    chunks = batches(stream, cfg.batch_size)
    marker = vocab.passage_id
    step = 0
    done = False
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    if log_fh and header is not None:
        log_fh.write("# config: " + json.dumps(header, sort_keys=True) + "\n")
    try:
        for _epoch in range(cfg.epochs):
            for start in range(0, len(chunks), cfg.grad_accum_steps):
                group = chunks[start:start + cfg.grad_accum_steps]
                grads = {k: np.zeros_like(p.values) for k, p in state.params.items()}
                sums = {"l_r": 0.0, "l_g": 0.0, "l_cii": 0.0, "total": 0.0}
                for chunk in group:
                    batch = make_batch(chunk, vocab, passages, cfg.query_budget, cfg.passage_budget)
                    for it in batch.items:
                        consumed[it.kind] += 1
                    state.zero_grad()
                    try:
                        with nx.Tape() as tape:
                            jl = joint_loss(state, batch, cfg, marker)
                    except NumericError as e:
                        raise DivergenceError(f"{e} at step {step + 1}", component="forward",
                                              step=step + 1) from e
                    vals = jl.values()
                    for name, v in vals.items():
                        if not math.isfinite(v):
                            raise DivergenceError(
                                f"non-finite {name}={v} at step {step + 1}", component=name,
                                step=step + 1)
                        sums[name] += v
                    tape.backward(jl.total)
                    for k, p in state.params.items():
                        if p.grad is not None:
                            grads[k] += p.grad
                n = len(group)
                state.zero_grad()
                opt.step({k: g / n for k, g in grads.items()})
                step += 1
                rec = {"step": step, **{k: v / n for k, v in sums.items()},
                       "n_convsearch": consumed["convsearch"]}
                log.append(rec)
                if log_fh:
                    log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                if progress is not None:
                    progress(rec)
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    done = True
                    break
            if done:
                break
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_path is not None:
        save_checkpoint(state, checkpoint_path, header)
    return TrainResult(state, log, consumed)


def read_loss_log(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip() and not line.startswith("#")]


def check_stream(stream: Iterable[TrainingExample]) -> dict[str, int]:
    counts = {"adhoc": 0, "instruct": 0, "convsearch": 0}
    for ex in stream:
        counts[ex.kind] += 1
    return counts
