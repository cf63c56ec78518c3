import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from convrag.errors import IntegrityError, UndefinedMetricError
from convrag.index import RankedList, read_run_file, write_run_file
from convrag.inference import TurnResult, read_response_file, write_response_file
from convrag.metrics import (NORMALIZATION, evaluate, gold_tables, ndcg_at_k, read_report_records,
                             recall_at_k, token_f1, write_report, write_turn_tsv)

import oracle

ids = st.lists(st.sampled_from([f"p{i}" for i in range(12)]), unique=True, max_size=12)
rels = st.sets(st.sampled_from([f"p{i}" for i in range(12)]), min_size=1)
words = st.lists(st.sampled_from(["a", "b", "c", "The", "the", "x"]), max_size=8).map(" ".join)


class TestSpotValues:
    def test_single_relevant_at_rank_two(self):
        assert ndcg_at_k(["x", "g", "y"], {"g"}, 3) == pytest.approx(0.63093, abs=1e-5)
        assert ndcg_at_k(["x", "g", "y"], {"g"}, 3) == pytest.approx(1 / math.log2(3), abs=1e-15)

    def test_perfect_and_empty(self):
        assert ndcg_at_k(["a", "b", "c"], {"a", "b", "c", "d"}, 3) == 1.0
        assert ndcg_at_k(["x", "y"], {"a"}, 3) == 0.0

    def test_recall(self):
        assert recall_at_k(["a", "b"], {"a", "b"}, 10) == 1.0
        assert recall_at_k(["a"] + [f"n{i}" for i in range(12)], {"a", "z"}, 10) == 0.5
        assert recall_at_k(["z"], {"z"}, 10) == 1.0

    def test_f1(self):
        assert token_f1("the cat sat", "the cat ran") == pytest.approx(2 / 3, abs=1e-9)
        assert token_f1("a b", "a b") == 1.0
        assert token_f1("a b", "c d") == 0.0
        assert token_f1("", "a") == 0.0 and token_f1("a", "") == 0.0
        assert token_f1("The CAT", "the cat") == 1.0

    def test_empty_relevant_set_is_undefined(self):
        with pytest.raises(UndefinedMetricError):
            ndcg_at_k(["a"], set(), 3)
        with pytest.raises(UndefinedMetricError):
            recall_at_k(["a"], set(), 3)

    def test_accepts_ranked_list(self):
        rl = RankedList("q", (("x", 2.0), ("g", 1.0)))
        assert ndcg_at_k(rl, {"g"}, 3) == ndcg_at_k(["x", "g"], {"g"}, 3)


def test_random_instances_match_oracle_exactly():
    rng = np.random.default_rng(0)
    vocab = ["a", "b", "c", "d", "e", "f"]
    for _ in range(1000):
        pool = [f"p{i}" for i in range(int(rng.integers(1, 30)))]
        ranked = [pool[i] for i in rng.permutation(len(pool))[: int(rng.integers(0, len(pool) + 1))]]
        rel = {pool[i] for i in rng.choice(len(pool), int(rng.integers(1, len(pool) + 1)), replace=False)}
        k = int(rng.integers(1, 15))
        assert ndcg_at_k(ranked, rel, k) == oracle.ndcg(ranked, rel, k)
        assert recall_at_k(ranked, rel, k) == oracle.recall(ranked, rel, k)
        a = " ".join(rng.choice(vocab, int(rng.integers(0, 9))))
        b = " ".join(rng.choice(vocab, int(rng.integers(0, 9))))
        assert token_f1(a, b) == oracle.f1(a, b)


@given(ids, rels, st.integers(1, 12), st.randoms(use_true_random=False))
def test_invariant_below_cutoff(ranked, rel, k, rnd):
    tail = ranked[k:]
    rnd.shuffle(tail)
    perm = ranked[:k] + tail
    assert ndcg_at_k(perm, rel, k) == ndcg_at_k(ranked, rel, k)
    assert recall_at_k(perm, rel, k) == recall_at_k(ranked, rel, k)


@given(ids, rels, st.integers(1, 12), st.data())
def test_promoting_relevant_never_hurts(ranked, rel, k, data):
    hits = [i for i, p in enumerate(ranked) if p in rel and i > 0]
    if not hits:
        return
    i = data.draw(st.sampled_from(hits))
    j = data.draw(st.integers(0, i - 1))
    if ranked[j] in rel:
        return
    swapped = list(ranked)
    swapped[i], swapped[j] = swapped[j], swapped[i]
    assert ndcg_at_k(swapped, rel, k) >= ndcg_at_k(ranked, rel, k)


@given(ids, rels, st.integers(1, 12))
def test_bounds(ranked, rel, k):
    assert 0.0 <= ndcg_at_k(ranked, rel, k) <= 1.0 + 1e-12
    assert 0.0 <= recall_at_k(ranked, rel, k) <= 1.0


@given(words, words)
def test_f1_symmetric(a, b):
    assert token_f1(a, b) == token_f1(b, a)
    assert 0.0 <= token_f1(a, b) <= 1.0


def _result(qid, turn, response, pids=None):
    ranked = None if pids is None else RankedList(qid, tuple((p, -i) for i, p in enumerate(pids)))
    return TurnResult(qid, qid.split("_")[0], turn, response, ranked)


class TestEvaluate:
    def test_perfect_single_turn(self):
        rep = evaluate([_result("s_1", 1, "x y", ["g"])], {"s_1": {"g"}}, {"s_1": "x y"})
        assert rep.aggregates == {"ndcg@3": 1.0, "recall@10": 1.0, "f1": 1.0}

    def test_mean_of_two(self):
        rs = [_result("s_1", 1, "a"), _result("s_2", 2, "b")]
        rep = evaluate(rs, {}, {"s_1": "z", "s_2": "b"})
        assert rep.aggregates["f1"] == 0.5
        assert rep.by_turn == {1: {"f1": 0.0}, 2: {"f1": 1.0}}

    def test_missing_gold_lists_turns(self):
        with pytest.raises(IntegrityError, match="s_2"):
            evaluate([_result("s_1", 1, "a"), _result("s_2", 1, "a")], {}, {"s_1": "a"})

    def test_empty_qrels_excluded_and_counted(self):
        rs = [_result("s_1", 1, "a", ["g"]), _result("t_1", 1, "a", ["g"])]
        rep = evaluate(rs, {"s_1": {"g"}}, {"s_1": "a", "t_1": "a"})
        assert rep.n_excluded_retrieval == 1
        assert rep.aggregates["recall@10"] == 1.0

    def test_reliability_pairs(self):
        rep = evaluate([_result("s_1", 1, "a b")], {}, {"s_1": "a b"}, {"s_1": "a b c d"})
        assert rep.reliability == {"f1(r',r)": 1.0, "f1(r',E)": pytest.approx(2 / 3)}


def test_report_matches_recomputation_from_files(small_corpus, tmp_path):
    sessions = small_corpus.test_sessions
    rng = np.random.default_rng(1)
    pids = [p.pid for p in small_corpus.collection]
    results = []
    for s in sessions:
        for n in range(1, len(s) + 1):
            hits = [pids[i] for i in rng.permutation(len(pids))[:10]]
            if rng.random() < 0.5:
                hits[int(rng.integers(10))] = s.turn(n).gold_pids[0]
            hits = list(dict.fromkeys(hits))
            resp = s.turn(n).response if rng.random() < 0.5 else "e1 v3"
            results.append(_result(s.turn_id(n), n, resp, hits))
    qrels, gold, ev = gold_tables(sessions)
    rep = evaluate(results, qrels, gold, ev)
    write_run_file(tmp_path / "run.txt", [r.ranked for r in results])
    write_response_file(tmp_path / "resp.jsonl", results)
    write_report(tmp_path / "report.txt", rep, {"config": {"seed": 1}})
    write_turn_tsv(tmp_path / "turns.tsv", rep)

    runs = read_run_file(tmp_path / "run.txt")
    resps = read_response_file(tmp_path / "resp.jsonl")
    nd, rc, f1 = [], [], []
    for r in resps:
        qid = f"{r['sid']}_{r['turn']}"
        ranked = [p for p, _ in runs[qid]]
        nd.append(oracle.ndcg(ranked, qrels[qid], 3))
        rc.append(oracle.recall(ranked, qrels[qid], 10))
        f1.append(oracle.f1(r["response"], gold[qid]))
    recs = {(x["metric"], x["scope"]): x["value"] for x in read_report_records(tmp_path / "report.txt")}
    assert recs["ndcg@3", "all"] == math.fsum(nd) / len(nd)
    assert recs["recall@10", "all"] == math.fsum(rc) / len(rc)
    assert recs["f1", "all"] == math.fsum(f1) / len(f1)
    text = (tmp_path / "report.txt").read_text()
    assert NORMALIZATION in text and '"seed": 1' in text
    assert (tmp_path / "turns.tsv").read_text().splitlines()[0].startswith("turn\tn\t")
