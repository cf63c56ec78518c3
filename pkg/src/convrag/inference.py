"""Greedy response generation and the end-to-end conversational pipeline."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .corpus import QueryContext, Session, compose_session_query, passage_tokens
from .errors import ConfigError, ContextOverflowError
from .index import DenseIndex, RankedList, header_line, search
from .model import ModelState, build_session_mask, causal_mask, next_token_logits
from .vocab import Vocab

MODES = ("zero_shot", "rag", "gold_evidence", "history_aware")


@dataclass(frozen=True)
class GenerationConfig:
    max_new_tokens: int = 16
    top_k_passages: int = 10
    mode: str = "rag"
    query_budget: int = 64
    passage_budget: int = 32
    history_top: int = 3
    # retrieve in zero_shot mode too, so its run file can be compared
    log_retrieval: bool = False
    # "causal", or "session": new tokens see only the prompt's last position
    decode_mask: str = "causal"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown generation mode {self.mode!r}; choose from {MODES}")
        if self.max_new_tokens < 1:
            raise ConfigError("max_new_tokens must be >= 1")
        if self.decode_mask not in ("causal", "session"):
            raise ConfigError(f"unknown decode_mask {self.decode_mask!r}")
        if self.mode in ("rag", "history_aware") and self.top_k_passages < 1:
            raise ConfigError("top_k_passages must be >= 1 with retrieval")


@dataclass
class TurnResult:
    qid: str
    sid: str
    turn: int
    response: str
    ranked: RankedList | None = None
    pids_used: list[str] = field(default_factory=list)
    metrics: dict[str, float] = field(default_factory=dict)


def prompt_tokens(ctx: QueryContext | Sequence[int], passages: Sequence[Sequence[int]],
                  vocab: Vocab) -> list[int]:
    """Context, then a passage marker plus tokens per passage, then the response marker.

    The end-of-sequence token marks where the response starts: it is the same
    representation position the session-masked generation loss decodes from.
    """
    toks = list(ctx.tokens if isinstance(ctx, QueryContext) else ctx)
    for p in passages:
        toks += [vocab.passage_id] + list(p)
    toks.append(vocab.eos_id)
    return toks


def fit_passages(ctx_len: int, passages: Sequence[Sequence[int]], room: int) -> int:
    """How many leading (highest-ranked) passages fit in ``room`` tokens."""
    used = ctx_len + 1
    n = 0
    for p in passages:
        if used + 1 + len(p) > room:
            break
        used += 1 + len(p)
        n += 1
    return n


def generate(state: ModelState, ctx: QueryContext, passages: Sequence[str], cfg: GenerationConfig,
             vocab: Vocab) -> str:
    return generate_tokens(state, ctx, passages, cfg, vocab)[0]


def generate_tokens(state: ModelState, ctx: QueryContext, passages: Sequence[str],
                    cfg: GenerationConfig, vocab: Vocab) -> tuple[str, int]:
    """Greedy decoding; returns the text and how many passages fit in the prompt."""
    room = state.config.max_seq_len - cfg.max_new_tokens
    ptoks = [passage_tokens(p, cfg.passage_budget, vocab) for p in passages]
    if len(ctx) + 1 > room:
        raise ContextOverflowError(
            f"context of {len(ctx)} tokens leaves no room for {cfg.max_new_tokens} new tokens")
    n_fit = fit_passages(len(ctx), ptoks, room)
    seq = prompt_tokens(ctx, ptoks[:n_fit], vocab)
    eos = vocab.eos_id
    m = len(seq)
    out: list[int] = []
    for _ in range(cfg.max_new_tokens):
        if cfg.decode_mask == "session":
            mask = build_session_mask(m, len(seq) - m)
        else:
            mask = causal_mask(len(seq))
        logits = next_token_logits(state, seq, mask).values[-1]
        nxt = int(np.argmax(logits))
        if nxt == eos:
            break
        out.append(nxt)
        seq.append(nxt)
    return vocab.decode(out), n_fit


@dataclass
class PipelineOutput:
    results: list[TurnResult]
    runs: list[RankedList]


def run_pipeline(state: ModelState, index: DenseIndex | None, sessions: Iterable[Session],
                 cfg: GenerationConfig, vocab: Vocab, passages: Mapping[str, str],
                 retriever: ModelState | None = None) -> PipelineOutput:
    """Per turn: compose the query from gold history, retrieve, and generate.

    ``retriever`` defaults to ``state`` (one model for both roles); passing a
    different model gives the separated two-model system.
    """
    retriever = state if retriever is None else retriever
    needs_search = cfg.mode in ("rag", "history_aware") or cfg.log_retrieval
    if needs_search and index is None:
        raise ConfigError(f"mode {cfg.mode} needs an index")
    if index is not None and needs_search:
        index.check(retriever)
    qbudget = min(cfg.query_budget, state.config.max_seq_len - cfg.max_new_tokens - 1,
                  retriever.config.max_seq_len - 1)
    results: list[TurnResult] = []
    runs: list[RankedList] = []
    for s in sessions:
        history_hits: list[list[str]] = []
        for n in range(1, len(s) + 1):
            qid = s.turn_id(n)
            ctx = compose_session_query(s, n, qbudget, vocab)
            ranked = None
            if needs_search:
                k = max(cfg.top_k_passages, cfg.history_top)
                ranked = search(index, retriever, ctx, k, qid)
                ranked = RankedList(qid, ranked.hits[: cfg.top_k_passages])
                runs.append(ranked)
            if cfg.mode == "zero_shot":
                pids = []
            elif cfg.mode == "rag":
                pids = ranked.pids
            elif cfg.mode == "gold_evidence":
                pids = list(s.turn(n).gold_pids)
            else:
                pids = list(ranked.pids)
                for hist in history_hits:
                    pids += [p for p in hist[: cfg.history_top] if p not in pids]
            text, n_fit = generate_tokens(state, ctx, [passages[p] for p in pids], cfg, vocab)
            results.append(TurnResult(qid, s.sid, n, text, ranked, pids[:n_fit]))
            if ranked is not None:
                history_hits.append(ranked.pids)
    return PipelineOutput(results, runs)


def write_response_file(path: str | Path, results: Iterable[TurnResult],
                        header: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header is not None:
            fh.write(header_line(header))
        for r in results:
            fh.write(json.dumps({"sid": r.sid, "turn": r.turn, "response": r.response,
                                 "pids_used": r.pids_used}, sort_keys=True) + "\n")


def read_response_file(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip() and not line.startswith("#")]
