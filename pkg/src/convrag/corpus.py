"""Conversations, passages, training-example formats, and the synthetic corpus."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence, Union

import numpy as np

from .errors import ContextOverflowError, IntegrityError, ParseError
from .vocab import FUNCTION_WORDS, SPECIALS, Vocab


@dataclass(frozen=True)
class Turn:
    query: str
    response: str = ""
    gold_pids: tuple[str, ...] = ()
    evidence: str | None = None
    # oracle self-contained rewrite of the query (synthetic data only)
    rewrite: str | None = None

    def __post_init__(self):
        if not self.query.strip():
            raise ValueError("turn query must be nonempty")
        object.__setattr__(self, "gold_pids", tuple(self.gold_pids))


@dataclass(frozen=True)
class Session:
    sid: str
    turns: tuple[Turn, ...]

    def __post_init__(self):
        object.__setattr__(self, "turns", tuple(self.turns))

    def __len__(self) -> int:
        return len(self.turns)

    def turn(self, n: int) -> Turn:
        """1-based turn access."""
        if not 1 <= n <= len(self.turns):
            raise IndexError(f"turn {n} outside 1..{len(self.turns)}")
        return self.turns[n - 1]

    def turn_id(self, n: int) -> str:
        return f"{self.sid}_{n}"


@dataclass(frozen=True)
class Passage:
    pid: str
    text: str


@dataclass(frozen=True)
class AdHocPair:
    query: str
    pos_pid: str
    neg_pids: tuple[str, ...] = ()
    kind = "adhoc"


@dataclass(frozen=True)
class InstructConv:
    session: Session
    turn: int
    kind = "instruct"

    @property
    def response(self) -> str:
        return self.session.turn(self.turn).response


@dataclass(frozen=True)
class ConvSearch:
    session: Session
    turn: int
    pos_pid: str
    kind = "convsearch"

    @property
    def response(self) -> str:
        return self.session.turn(self.turn).response


TrainingExample = Union[AdHocPair, InstructConv, ConvSearch]


@dataclass(frozen=True)
class QueryContext:
    tokens: tuple[int, ...]
    # position the appended end-of-sequence token will occupy
    rep_index: int

    def __len__(self) -> int:
        return len(self.tokens)


# ---------------------------------------------------------------------------
# session query composition


def compose_session_query(session: Session, n: int, budget: int, vocab: Vocab) -> QueryContext:
    """Serialize ``[q1, r1, ..., q_{n-1}, r_{n-1}, q_n]`` with role markers.

    Over budget, whole oldest turns go first; if the last history turn alone
    still does not fit, its response is cut from the head before the turn is
    dropped. The current query is never cut.
    """
    if not 1 <= n <= len(session):
        raise IndexError(f"turn {n} outside 1..{len(session)}")
    qm, rm = vocab.query_id, vocab.response_id
    current = [qm] + vocab.encode(session.turn(n).query)
    if len(current) > budget:
        raise ContextOverflowError(
            f"{session.turn_id(n)}: current query needs {len(current)} tokens, budget is {budget}")
    history = [(vocab.encode(t.query), vocab.encode(t.response)) for t in session.turns[: n - 1]]

    def size(h):
        return sum(2 + len(q) + len(r) for q, r in h) + len(current)

    while len(history) > 1 and size(history) > budget:
        history.pop(0)
    if history and size(history) > budget:
        q, r = history[0]
        cut = size(history) - budget
        if cut <= len(r):
            history[0] = (q, r[cut:])
        else:
            history.pop(0)
    tokens: list[int] = []
    for q, r in history:
        tokens += [qm] + q + [rm] + r
    tokens += current
    return QueryContext(tuple(tokens), len(tokens))


def adhoc_query(query: str, budget: int, vocab: Vocab) -> QueryContext:
    """Single-turn query in the same serialization as a first conversation turn."""
    return compose_session_query(Session("adhoc", (Turn(query),)), 1, budget, vocab)


def passage_tokens(text: str, budget: int, vocab: Vocab) -> list[int]:
    return vocab.encode(text)[:budget]


# ---------------------------------------------------------------------------
# synthetic corpus


@dataclass(frozen=True)
class SynthSpec:
    n_sessions: int = 200
    turns_per_session: int = 3
    collection_size: int = 1000
    vocab_size: int = 256
    seed: int = 0
    heldout_fraction: float = 0.2
    values_per_passage: int = 2
    fillers_per_passage: int = 2


@dataclass
class Corpus:
    spec: SynthSpec
    vocab: Vocab
    collection: list[Passage]
    train_sessions: list[Session]
    test_sessions: list[Session]
    adhoc: list[AdHocPair]
    examples: list[TrainingExample] = field(default_factory=list)

    @property
    def sessions(self) -> list[Session]:
        return self.train_sessions + self.test_sessions


def synthetic_vocab(vocab_size: int) -> tuple[Vocab, list[str], list[str], list[str]]:
    """Split the free vocabulary into entity, aspect, and value words."""
    free = vocab_size - len(SPECIALS) - len(FUNCTION_WORDS)
    n_ent = free // 4
    n_asp = free // 10
    n_val = free - n_ent - n_asp
    if min(n_ent, n_asp, n_val) < 2:
        raise ValueError(f"vocab_size={vocab_size} too small for the synthetic templates")
    ents = [f"e{i}" for i in range(n_ent)]
    asps = [f"a{i}" for i in range(n_asp)]
    vals = [f"v{i}" for i in range(n_val)]
    vocab = Vocab(list(SPECIALS) + list(FUNCTION_WORDS) + ents + asps + vals)
    assert len(vocab) == vocab_size
    return vocab, ents, asps, vals


def synth_corpus(spec: SynthSpec) -> Corpus:
    """Sessions about (entity, aspect) facts with planted lexical keys.

    Each fact (entity, aspect) has one passage ``"<e> <a> is <values> <fillers>"``.
    A session fixes one entity; turn 1 names it, later turns only name the
    aspect, so the entity has to come from the history. The gold response is
    ``"<e> <a> is <values>"``, a prefix of the gold passage.
    """
    n_gold = spec.n_sessions * spec.turns_per_session
    if min(spec.n_sessions, spec.turns_per_session, spec.collection_size) < 1:
        raise ValueError("synth spec sizes must be positive")
    if spec.collection_size < n_gold:
        raise ValueError(
            f"collection_size={spec.collection_size} < sessions x turns = {n_gold}")
    if not 0.0 <= spec.heldout_fraction < 1.0:
        raise ValueError("heldout_fraction must be in [0, 1)")
    vocab, ents, asps, vals = synthetic_vocab(spec.vocab_size)
    if spec.turns_per_session > len(asps):
        raise ValueError(f"turns_per_session exceeds the {len(asps)} available aspects")
    if spec.collection_size > len(ents) * len(asps):
        raise ValueError(
            f"collection_size={spec.collection_size} exceeds {len(ents) * len(asps)} distinct facts")
    rng = np.random.default_rng(spec.seed)

    used: set[tuple[int, int]] = set()
    plans: list[tuple[int, list[int]]] = []
    for _ in range(spec.n_sessions):
        for _attempt in range(1000):
            e = int(rng.integers(len(ents)))
            free = [a for a in range(len(asps)) if (e, a) not in used]
            if len(free) >= spec.turns_per_session:
                break
        else:
            raise ValueError("could not place sessions without reusing facts")
        aspects = [int(a) for a in rng.choice(free, size=spec.turns_per_session, replace=False)]
        used.update((e, a) for a in aspects)
        plans.append((e, aspects))
    rest = [(e, a) for e in range(len(ents)) for a in range(len(asps)) if (e, a) not in used]
    extra_idx = rng.choice(len(rest), size=spec.collection_size - n_gold, replace=False)
    facts = [(e, a) for e, aspects in plans for a in aspects] + [rest[i] for i in sorted(extra_idx)]

    pid_order = rng.permutation(len(facts))
    width = max(5, len(str(len(facts))))
    pid_of, text_of, resp_of = {}, {}, {}
    for slot, (e, a) in zip(pid_order, facts):
        pid = f"p{int(slot):0{width}d}"
        values = " ".join(vals[i] for i in rng.choice(len(vals), spec.values_per_passage, replace=False))
        fill = " ".join(vals[i] for i in rng.integers(len(vals), size=spec.fillers_per_passage))
        head = f"{ents[e]} {asps[a]} is {values}"
        pid_of[e, a] = pid
        text_of[e, a] = f"{head} {fill}".strip()
        resp_of[e, a] = head
    collection = sorted((Passage(pid_of[f], text_of[f]) for f in facts), key=lambda p: p.pid)

    sessions = []
    for s, (e, aspects) in enumerate(plans):
        turns = []
        for i, a in enumerate(aspects):
            q = f"what about {ents[e]} {asps[a]}" if i == 0 else f"and its {asps[a]}"
            turns.append(Turn(query=q, response=resp_of[e, a], gold_pids=(pid_of[e, a],),
                              evidence=text_of[e, a], rewrite=f"{ents[e]} {asps[a]}"))
        sessions.append(Session(f"s{s:04d}", tuple(turns)))
    n_test = int(round(spec.heldout_fraction * spec.n_sessions))
    train, test = sessions[: len(sessions) - n_test], sessions[len(sessions) - n_test:]

    held_pids = {pid for s in test for t in s.turns for pid in t.gold_pids}
    adhoc = [AdHocPair(f"tell me {ents[e]} {asps[a]}", pid_of[e, a])
             for e, a in sorted(facts, key=lambda f: pid_of[f]) if pid_of[e, a] not in held_pids]

    corpus = Corpus(spec, vocab, collection, train, test, adhoc)
    corpus.examples = build_examples(train, train, adhoc)
    return corpus


def build_examples(search_sessions: Sequence[Session], instruct_sessions: Sequence[Session],
                   adhoc: Sequence[AdHocPair]) -> list[TrainingExample]:
    """All three formats: ConvSearch needs a gold passage on the turn."""
    out: list[TrainingExample] = list(adhoc)
    for s in instruct_sessions:
        out += [InstructConv(s, n) for n in range(1, len(s) + 1) if s.turn(n).response]
    for s in search_sessions:
        for n in range(1, len(s) + 1):
            t = s.turn(n)
            if t.gold_pids and t.response:
                out.append(ConvSearch(s, n, t.gold_pids[0]))
    return out


def split_by_kind(examples: Iterable[TrainingExample]) -> dict[str, list[TrainingExample]]:
    out: dict[str, list[TrainingExample]] = {"adhoc": [], "instruct": [], "convsearch": []}
    for ex in examples:
        out[ex.kind].append(ex)
    return out


# ---------------------------------------------------------------------------
# line-delimited files


def passage_record(p: Passage) -> dict:
    return {"pid": p.pid, "text": p.text}


def session_record(s: Session) -> dict:
    turns = []
    for t in s.turns:
        rec = {"q": t.query, "r": t.response, "gold_pids": list(t.gold_pids)}
        if t.evidence is not None:
            rec["evidence"] = t.evidence
        if t.rewrite is not None:
            rec["rewrite"] = t.rewrite
        turns.append(rec)
    return {"sid": s.sid, "turns": turns}


def adhoc_record(a: AdHocPair) -> dict:
    rec = {"q": a.query, "pos_pid": a.pos_pid}
    if a.neg_pids:
        rec["neg_pids"] = list(a.neg_pids)
    return rec


def write_records(path: str | Path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True) + "\n")


def _require(rec: dict, name: str, typ, lineno: int, path):
    if name not in rec:
        raise ParseError(f"{path}:{lineno}: missing required field '{name}'", lineno, name)
    val = rec[name]
    if not isinstance(val, typ):
        raise ParseError(f"{path}:{lineno}: field '{name}' has type {type(val).__name__}",
                         lineno, name)
    return val


def _parse_passage(rec, lineno, path) -> Passage:
    return Passage(_require(rec, "pid", str, lineno, path), _require(rec, "text", str, lineno, path))


def _parse_session(rec, lineno, path) -> Session:
    sid = _require(rec, "sid", str, lineno, path)
    turns = []
    for i, t in enumerate(_require(rec, "turns", list, lineno, path)):
        if not isinstance(t, dict):
            raise ParseError(f"{path}:{lineno}: turn {i + 1} is not an object", lineno, "turns")
        q = _require(t, "q", str, lineno, path)
        if not q.strip():
            raise ParseError(f"{path}:{lineno}: turn {i + 1} has an empty query", lineno, "q")
        r = t.get("r", "")
        gold = t.get("gold_pids", [])
        if not isinstance(r, str) or not isinstance(gold, list):
            raise ParseError(f"{path}:{lineno}: malformed turn {i + 1}", lineno, "turns")
        turns.append(Turn(q, r, tuple(gold), t.get("evidence"), t.get("rewrite")))
    return Session(sid, tuple(turns))


def _parse_adhoc(rec, lineno, path) -> AdHocPair:
    q = _require(rec, "q", str, lineno, path)
    pos = _require(rec, "pos_pid", str, lineno, path)
    neg = rec.get("neg_pids", [])
    if not isinstance(neg, list):
        raise ParseError(f"{path}:{lineno}: field 'neg_pids' must be a list", lineno, "neg_pids")
    return AdHocPair(q, pos, tuple(neg))


_PARSERS = {"collection": _parse_passage, "session": _parse_session, "adhoc": _parse_adhoc}


def _detect(rec: dict) -> str:
    if "sid" in rec or "turns" in rec:
        return "session"
    if "pos_pid" in rec or ("q" in rec and "pid" not in rec):
        return "adhoc"
    return "collection"


def load_dataset(path: str | Path, kind: str | None = None) -> list:
    """Load a line-delimited record file, preserving order.

    ``kind`` is one of ``collection``, ``session``, ``adhoc``; when omitted it
    is inferred per record from its keys. Unknown fields are ignored.
    """
    if kind is not None and kind not in _PARSERS:
        raise ValueError(f"unknown record kind {kind!r}")
    out = []
    pids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"{path}:{lineno}: invalid JSON ({e.msg})", lineno) from e
            if not isinstance(rec, dict):
                raise ParseError(f"{path}:{lineno}: record is not an object", lineno)
            k = kind or _detect(rec)
            item = _PARSERS[k](rec, lineno, path)
            if isinstance(item, Passage):
                if item.pid in pids:
                    raise IntegrityError(f"{path}:{lineno}: duplicate passage id {item.pid}")
                pids.add(item.pid)
            out.append(item)
    return out


def check_gold_resolves(sessions: Iterable[Session], collection: Iterable[Passage]) -> None:
    known = {p.pid for p in collection}
    missing = [(s.sid, pid) for s in sessions for t in s.turns for pid in t.gold_pids
               if pid not in known]
    if missing:
        sid, pid = missing[0]
        raise IntegrityError(f"{len(missing)} gold ids do not resolve, e.g. {pid} in {sid}")


# file names inside a data directory
COLLECTION_FILE = "collection.jsonl"
TRAIN_FILE = "sessions_train.jsonl"
TEST_FILE = "sessions_test.jsonl"
INSTRUCT_FILE = "instruct.jsonl"
ADHOC_FILE = "adhoc.jsonl"
VOCAB_FILE = "vocab.txt"


def write_corpus(corpus: Corpus, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        COLLECTION_FILE: [passage_record(p) for p in corpus.collection],
        TRAIN_FILE: [session_record(s) for s in corpus.train_sessions],
        TEST_FILE: [session_record(s) for s in corpus.test_sessions],
        # instruction-style conversations: same dialogues, no passage labels
        INSTRUCT_FILE: [session_record(_strip_gold(s)) for s in corpus.train_sessions],
        ADHOC_FILE: [adhoc_record(a) for a in corpus.adhoc],
    }
    written = []
    for name, recs in paths.items():
        write_records(out / name, recs)
        written.append(out / name)
    corpus.vocab.save(out / VOCAB_FILE)
    written.append(out / VOCAB_FILE)
    return written


def _strip_gold(s: Session) -> Session:
    return Session(s.sid, tuple(Turn(t.query, t.response) for t in s.turns))


@dataclass
class DataDir:
    vocab: Vocab
    collection: list[Passage]
    train_sessions: list[Session]
    test_sessions: list[Session]
    instruct_sessions: list[Session]
    adhoc: list[AdHocPair]

    def examples(self) -> list[TrainingExample]:
        return build_examples(self.train_sessions, self.instruct_sessions, self.adhoc)

    def passage_text(self) -> dict[str, str]:
        return {p.pid: p.text for p in self.collection}


def read_data_dir(path: str | Path) -> DataDir:
    d = Path(path)

    def opt(name, kind):
        p = d / name
        return load_dataset(p, kind) if p.exists() else []

    collection = load_dataset(d / COLLECTION_FILE, "collection")
    train, test = opt(TRAIN_FILE, "session"), opt(TEST_FILE, "session")
    instruct, adhoc = opt(INSTRUCT_FILE, "session"), opt(ADHOC_FILE, "adhoc")
    check_gold_resolves(train + test, collection)
    known = {p.pid for p in collection}
    for a in adhoc:
        if a.pos_pid not in known:
            raise IntegrityError(f"adhoc positive {a.pos_pid} not in collection")
    if (d / VOCAB_FILE).exists():
        vocab = Vocab.load(d / VOCAB_FILE)
    else:
        texts = [p.text for p in collection] + [a.query for a in adhoc]
        texts += [x for s in train + test + instruct for t in s.turns for x in (t.query, t.response)]
        vocab = Vocab.from_texts(texts)
    return DataDir(vocab, collection, train, test, instruct, adhoc)


# ---------------------------------------------------------------------------
# mixing


def mix_datasets(sources: Sequence[Sequence], ratios: Sequence[float], seed: int = 0,
                 shuffle: bool = False) -> Iterator:
    """Deterministic stride interleave of several example sources.

    At each step the source with the largest deficit ``w_i * L - count_i``
    (normalized weights, L = items emitted including this one) is chosen, ties
    to the lower index. An exhausted source drops out and the rest continue.
    With ``shuffle`` each source is permuted first using ``seed``.
    """
    if len(sources) != len(ratios):
        raise ValueError("need one ratio per source")
    if any(r < 0 for r in ratios):
        raise ValueError("ratios must be nonnegative")
    tot = float(sum(ratios))
    if tot <= 0:
        raise ValueError("at least one ratio must be nonzero")
    w = [r / tot for r in ratios]
    rng = np.random.default_rng(seed)
    seqs = []
    for src in sources:
        src = list(src)
        if shuffle:
            src = [src[i] for i in rng.permutation(len(src))]
        seqs.append(src)
    pos = [0] * len(seqs)
    emitted = 0
    while True:
        live = [i for i, s in enumerate(seqs) if w[i] > 0 and pos[i] < len(s)]
        if not live:
            return
        emitted += 1
        pick = max(live, key=lambda i: (w[i] * emitted - pos[i], -i))
        yield seqs[pick][pos[pick]]
        pos[pick] += 1
