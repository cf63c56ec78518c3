"""Exact dense index over the passage collection."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Passage, QueryContext, passage_tokens
from .errors import IntegrityError
from .model import ModelState, embed_batch
from .npzio import save_npz
from .vocab import Vocab


@dataclass(frozen=True)
class RankedList:
    qid: str
    hits: tuple[tuple[str, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "hits", tuple((str(p), float(s)) for p, s in self.hits))
        ids = [p for p, _ in self.hits]
        if len(set(ids)) != len(ids):
            raise ValueError(f"{self.qid}: duplicate passage ids in ranked list")
        for (p1, s1), (p2, s2) in zip(self.hits, self.hits[1:]):
            if not (s1 > s2 or (s1 == s2 and p1 < p2)):
                raise ValueError(f"{self.qid}: ranked list out of order at {p1}, {p2}")

    @property
    def pids(self) -> list[str]:
        return [p for p, _ in self.hits]

    def __len__(self) -> int:
        return len(self.hits)


@dataclass
class DenseIndex:
    matrix: np.ndarray  # |C| x d
    pids: list[str]
    fingerprint: str

    def __post_init__(self):
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.pids):
            raise IntegrityError("index matrix rows do not match the id table")
        if len(set(self.pids)) != len(self.pids):
            raise IntegrityError("duplicate passage ids in index")

    def __len__(self) -> int:
        return len(self.pids)

    def save(self, path: str | Path, header: dict | None = None) -> None:
        meta = {"fingerprint": self.fingerprint}
        if header is not None:
            meta["header"] = header
        save_npz(path, {"matrix": self.matrix, "pids": np.array(self.pids),
                        "meta": np.array(json.dumps(meta, sort_keys=True))})

    @classmethod
    def load(cls, path: str | Path, state: ModelState | None = None) -> "DenseIndex":
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            index = cls(data["matrix"], [str(p) for p in data["pids"]], meta["fingerprint"])
        if state is not None:
            index.check(state)
        return index

    def check(self, state: ModelState) -> None:
        fp = state.fingerprint()
        if fp != self.fingerprint:
            raise IntegrityError(
                f"index was built with checkpoint {self.fingerprint}, model is {fp}")


def encode_passages(state: ModelState, texts: Sequence[str], vocab: Vocab, budget: int,
                    chunk: int = 64) -> np.ndarray:
    rows = []
    for i in range(0, len(texts), chunk):
        toks = [passage_tokens(t, budget, vocab) for t in texts[i:i + chunk]]
        rows.append(embed_batch(state, toks).values)
    return np.concatenate(rows, axis=0)


def build_index(collection: Sequence[Passage], state: ModelState, vocab: Vocab,
                passage_budget: int = 32) -> DenseIndex:
    if not collection:
        raise ValueError("cannot index an empty collection")
    mat = encode_passages(state, [p.text for p in collection], vocab, passage_budget)
    return DenseIndex(mat, [p.pid for p in collection], state.fingerprint())


def rank(scores: np.ndarray, pids: Sequence[str], k: int) -> list[tuple[str, float]]:
    """Top-k by score descending, ties by passage id ascending."""
    if k < 1:
        raise ValueError("k must be >= 1")
    k = min(k, len(pids))
    if k < len(pids):
        # everything scoring at least the k-th largest value is a candidate
        kth = np.partition(scores, len(scores) - k)[len(scores) - k]
        cand = np.flatnonzero(scores >= kth)
    else:
        cand = np.arange(len(pids))
    order = sorted(cand, key=lambda i: (-scores[i], pids[i]))[:k]
    return [(pids[i], float(scores[i])) for i in order]


def query_embedding(state: ModelState, ctx: QueryContext | Sequence[int]) -> np.ndarray:
    tokens = ctx.tokens if isinstance(ctx, QueryContext) else ctx
    return embed_batch(state, [tokens]).values[0]


def search(index: DenseIndex, state: ModelState, ctx: QueryContext, k: int,
           qid: str = "q") -> RankedList:
    index.check(state)
    return search_vector(index, query_embedding(state, ctx), k, qid)


def search_vector(index: DenseIndex, qvec: np.ndarray, k: int, qid: str = "q") -> RankedList:
    scores = index.matrix @ qvec
    return RankedList(qid, tuple(rank(scores, index.pids, k)))


def header_line(header: dict) -> str:
    return "# config: " + json.dumps(header, sort_keys=True) + "\n"


def write_run_file(path: str | Path, runs: Iterable[RankedList], tag: str = "convrag",
                   header: dict | None = None) -> None:
    """Six-column run format: ``qid Q0 pid rank score tag``.

    A ``header`` becomes one leading ``# config:`` comment line.
    """
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header is not None:
            fh.write(header_line(header))
        for rl in runs:
            for r, (pid, score) in enumerate(rl.hits, 1):
                fh.write(f"{rl.qid} Q0 {pid} {r} {score:.17g} {tag}\n")


def read_run_file(path: str | Path) -> dict[str, list[tuple[str, float]]]:
    runs: dict[str, list[tuple[int, str, float]]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if len(parts) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(parts)}")
            qid, _, pid, r, score, _ = parts
            runs.setdefault(qid, []).append((int(r), pid, float(score)))
    return {q: [(p, s) for _, p, s in sorted(v)] for q, v in runs.items()}
