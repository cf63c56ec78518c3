import numpy as np
import pytest

from convrag.corpus import Passage, compose_session_query
from convrag.errors import IntegrityError
from convrag.index import (DenseIndex, RankedList, build_index, rank, read_run_file, search,
                           search_vector, write_run_file)
from convrag.model import ModelConfig, ModelState

import oracle


def hand_index():
    m = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [1.0, 0.0]])
    return DenseIndex(m, ["d", "c", "b", "a"], "fp")


class TestRank:
    def test_hand_vectors(self):
        rl = search_vector(hand_index(), np.array([2.0, 1.0]), 4)
        assert rl.hits == (("b", 3.0), ("a", 2.0), ("d", 2.0), ("c", 1.0))

    def test_ties_break_by_id(self):
        rl = search_vector(hand_index(), np.array([1.0, 1.0]), 3)
        assert rl.pids == ["b", "a", "c"]

    def test_k_beyond_collection(self):
        assert len(search_vector(hand_index(), np.array([0.0, 1.0]), 50)) == 4

    def test_tie_at_cutoff(self):
        # three passages share the k-th score; lowest ids win
        scores = np.array([5.0, 1.0, 1.0, 1.0, 0.0])
        assert rank(scores, ["e", "z", "b", "m", "a"], 3) == [("e", 5.0), ("b", 1.0), ("m", 1.0)]

    def test_k_zero(self):
        with pytest.raises(ValueError):
            rank(np.zeros(3), ["a", "b", "c"], 0)

    def test_random_against_full_scan(self):
        rng = np.random.default_rng(0)
        m = np.round(rng.normal(size=(500, 6)), 1)  # rounding plants many ties
        pids = [f"p{i:04d}" for i in rng.permutation(500)]
        index = DenseIndex(m, pids, "fp")
        for _ in range(200):
            q = np.round(rng.normal(size=6), 1)
            k = int(rng.integers(1, 40))
            assert list(search_vector(index, q, k).hits) == oracle.full_scan(m, pids, q, k)


class TestRankedList:
    def test_rejects_duplicates(self):
        with pytest.raises(ValueError):
            RankedList("q", (("a", 1.0), ("a", 0.5)))

    def test_rejects_disorder(self):
        with pytest.raises(ValueError):
            RankedList("q", (("a", 0.5), ("b", 1.0)))
        with pytest.raises(ValueError):
            RankedList("q", (("b", 1.0), ("a", 1.0)))


class TestDenseIndex:
    def test_built_with_model_fingerprint(self, small_corpus, tiny_state):
        index = build_index(small_corpus.collection, tiny_state, small_corpus.vocab)
        assert index.fingerprint == tiny_state.fingerprint()
        assert index.matrix.shape == (100, tiny_state.config.d_model)
        index.check(tiny_state)

    def test_fingerprint_mismatch(self, small_corpus, tiny_state):
        index = build_index(small_corpus.collection[:5], tiny_state, small_corpus.vocab)
        other = ModelState.init(ModelConfig(**{**tiny_state.config.__dict__, "seed": 99}))
        ctx = compose_session_query(small_corpus.train_sessions[0], 1, 64, small_corpus.vocab)
        with pytest.raises(IntegrityError):
            search(index, other, ctx, 3)

    def test_save_load(self, small_corpus, tiny_state, tmp_path):
        index = build_index(small_corpus.collection[:7], tiny_state, small_corpus.vocab)
        index.save(tmp_path / "i.npz")
        back = DenseIndex.load(tmp_path / "i.npz", tiny_state)
        assert back.pids == index.pids and back.matrix.tobytes() == index.matrix.tobytes()

    def test_duplicate_ids(self):
        with pytest.raises(IntegrityError):
            DenseIndex(np.zeros((2, 2)), ["a", "a"], "fp")

    def test_search_matches_full_scan_with_model(self, small_corpus, tiny_state):
        index = build_index(small_corpus.collection, tiny_state, small_corpus.vocab)
        for s in small_corpus.sessions[:4]:
            for n in range(1, len(s) + 1):
                ctx = compose_session_query(s, n, 64, small_corpus.vocab)
                q = oracle.embedding(tiny_state.params, tiny_state.config, ctx.tokens)
                got = search(index, tiny_state, ctx, 10, s.turn_id(n))
                want = oracle.full_scan(index.matrix, index.pids, q, 10)
                assert got.pids == [p for p, _ in want]
                np.testing.assert_allclose([s for _, s in got.hits], [s for _, s in want],
                                           rtol=1e-11)

    def test_empty_collection(self, tiny_state, small_corpus):
        with pytest.raises(ValueError):
            build_index([], tiny_state, small_corpus.vocab)


def test_run_file_round_trip(tmp_path):
    runs = [RankedList("s1_1", (("p2", 0.1 + 0.2), ("p1", -1e-300))),
            RankedList("s1_2", (("p9", 3.0),))]
    write_run_file(tmp_path / "run.txt", runs, tag="t")
    lines = (tmp_path / "run.txt").read_text().splitlines()
    assert lines[0].split() == ["s1_1", "Q0", "p2", "1", repr(0.1 + 0.2), "t"]
    assert all(len(ln.split()) == 6 for ln in lines)
    back = read_run_file(tmp_path / "run.txt")
    assert back == {r.qid: list(r.hits) for r in runs}


def test_passage_budget_truncates(tiny_state, small_corpus):
    long = Passage("x", " ".join(["e1"] * 50))
    short = Passage("x", " ".join(["e1"] * 4))
    a = build_index([long], tiny_state, small_corpus.vocab, passage_budget=4)
    b = build_index([short], tiny_state, small_corpus.vocab, passage_budget=4)
    assert a.matrix.tobytes() == b.matrix.tobytes()
