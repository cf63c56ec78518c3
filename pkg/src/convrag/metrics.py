"""Ranking and response metrics, per-turn aggregation, and report files."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .errors import IntegrityError, UndefinedMetricError
from .vocab import normalize

NORMALIZATION = "token F1 over lowercased whitespace tokens (no article or punctuation stripping)"


def _ids(ranked) -> list[str]:
    if hasattr(ranked, "pids"):
        return list(ranked.pids)
    return [r if isinstance(r, str) else r[0] for r in ranked]


def ndcg_at_k(ranked, rel: Iterable[str], k: int) -> float:
    """Binary-gain NDCG@k; ranks start at 1."""
    rel = set(rel)
    if not rel:
        raise UndefinedMetricError("NDCG is undefined for an empty relevant set")
    ids = _ids(ranked)[:k]
    dcg = sum(1.0 / math.log2(i + 1) for i, p in enumerate(ids, 1) if p in rel)
    idcg = sum(1.0 / math.log2(i + 1) for i in range(1, min(k, len(rel)) + 1))
    return dcg / idcg


def recall_at_k(ranked, rel: Iterable[str], k: int) -> float:
    rel = set(rel)
    if not rel:
        raise UndefinedMetricError("recall is undefined for an empty relevant set")
    return len(set(_ids(ranked)[:k]) & rel) / len(rel)


def token_f1(prediction: str, reference: str) -> float:
    pred, ref = normalize(prediction), normalize(reference)
    if not pred or not ref:
        return 0.0
    overlap = sum((Counter(pred) & Counter(ref)).values())
    if overlap == 0:
        return 0.0
    p, r = overlap / len(pred), overlap / len(ref)
    return 2 * p * r / (p + r)


@dataclass
class EvalReport:
    per_turn: list[dict]
    aggregates: dict[str, float]
    by_turn: dict[int, dict[str, float]]
    reliability: dict[str, float]
    n_turns: int
    n_excluded_retrieval: int
    header: dict = field(default_factory=dict)

    def records(self) -> list[dict]:
        out = [{"metric": m, "scope": "all", "value": v} for m, v in self.aggregates.items()]
        for n in sorted(self.by_turn):
            out += [{"metric": m, "scope": f"turn={n}", "value": v}
                    for m, v in self.by_turn[n].items()]
        out += [{"metric": m, "scope": "reliability", "value": v}
                for m, v in self.reliability.items()]
        return out


def _mean(xs: Sequence[float]) -> float:
    return math.fsum(xs) / len(xs)


def evaluate(results, qrels: Mapping[str, Iterable[str]], gold: Mapping[str, str],
             evidence: Mapping[str, str | None] | None = None, ndcg_k: int = 3,
             recall_k: int = 10) -> EvalReport:
    """Fill per-turn metrics and aggregate them.

    Retrieval metrics need a ranked list and a nonempty qrels entry; turns
    without qrels are left out of retrieval aggregates and counted.
    """
    evidence = evidence or {}
    missing = [r.qid for r in results if r.qid not in gold]
    if missing:
        raise IntegrityError(f"no gold response for turns: {', '.join(missing)}")
    per_turn, excluded = [], 0
    for r in results:
        row = {"qid": r.qid, "sid": r.sid, "turn": r.turn}
        if r.ranked is not None:
            rel = set(qrels.get(r.qid, ()))
            if rel:
                row["ndcg@%d" % ndcg_k] = ndcg_at_k(r.ranked, rel, ndcg_k)
                row["recall@%d" % recall_k] = recall_at_k(r.ranked, rel, recall_k)
            else:
                excluded += 1
        row["f1"] = token_f1(r.response, gold[r.qid])
        ev = evidence.get(r.qid)
        if ev:
            row["f1_evidence"] = token_f1(r.response, ev)
        r.metrics.update({k: v for k, v in row.items() if k not in ("qid", "sid", "turn")})
        per_turn.append(row)

    def agg(rows):
        keys = []
        for row in rows:
            keys += [k for k in row if k not in ("qid", "sid", "turn") and k not in keys]
        return {k: _mean([row[k] for row in rows if k in row]) for k in keys}

    aggregates = agg(per_turn) if per_turn else {}
    by_turn = {}
    for n in sorted({row["turn"] for row in per_turn}):
        by_turn[n] = agg([row for row in per_turn if row["turn"] == n])
    reliability = {}
    if "f1" in aggregates:
        reliability["f1(r',r)"] = aggregates["f1"]
    if "f1_evidence" in aggregates:
        reliability["f1(r',E)"] = aggregates["f1_evidence"]
    return EvalReport(per_turn, aggregates, by_turn, reliability, len(per_turn), excluded)


def gold_tables(sessions) -> tuple[dict, dict, dict]:
    """qrels, gold responses, and evidence keyed by turn id."""
    qrels, gold, ev = {}, {}, {}
    for s in sessions:
        for n in range(1, len(s) + 1):
            t = s.turn(n)
            qid = s.turn_id(n)
            qrels[qid] = set(t.gold_pids)
            gold[qid] = t.response
            ev[qid] = t.evidence
    return qrels, gold, ev


def write_report(path: str | Path, report: EvalReport, header: Mapping | None = None) -> None:
    """Readable table, then one JSON line per (metric, scope, value)."""
    header = dict(header or report.header)
    header.setdefault("normalization", NORMALIZATION)
    lines = [f"# {k}: {json.dumps(v, sort_keys=True)}" for k, v in sorted(header.items())]
    lines.append(f"# turns: {report.n_turns}  excluded_from_retrieval: {report.n_excluded_retrieval}")
    metrics = list(report.aggregates)
    lines.append("scope\t" + "\t".join(metrics))
    lines.append("all\t" + "\t".join(f"{report.aggregates[m]:.4f}" for m in metrics))
    for n, vals in sorted(report.by_turn.items()):
        lines.append(f"turn={n}\t" + "\t".join(
            f"{vals[m]:.4f}" if m in vals else "-" for m in metrics))
    lines.append("")
    lines.append("## records")
    lines += [json.dumps(r, sort_keys=True) for r in report.records()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_report_records(path: str | Path) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8").split("## records\n", 1)
    if len(text) != 2:
        raise ValueError(f"{path}: no records section")
    return [json.loads(line) for line in text[1].splitlines() if line.strip()]


def write_turn_tsv(path: str | Path, report: EvalReport) -> None:
    """Per-turn-index means, one row per conversation turn, for plotting."""
    metrics = list(report.aggregates)
    rows = ["turn\tn\t" + "\t".join(metrics)]
    for n, vals in sorted(report.by_turn.items()):
        count = sum(1 for r in report.per_turn if r["turn"] == n)
        rows.append(f"{n}\t{count}\t" + "\t".join(
            repr(vals[m]) if m in vals else "" for m in metrics))
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8")
