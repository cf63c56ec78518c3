"""Tiny decoder-only transformer used both as encoder and as generator."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DimensionError, IntegrityError, TokenIndexError, TruncationError
from .npzio import save_npz
from .numerics import Tensor


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 256
    eos_token_id: int = 2
    seed: int = 0
    mlp_ratio: int = 4
    init_std: float = 0.02

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if not 0 <= self.eos_token_id < self.vocab_size:
            raise ConfigError("eos_token_id must be < vocab_size")
        if self.max_seq_len < 8:
            raise ConfigError("max_seq_len must be >= 8")
        if min(self.vocab_size, self.d_model, self.n_layers, self.n_heads, self.mlp_ratio) < 1:
            raise ConfigError("model sizes must be positive")


@dataclass(frozen=True)
class AttentionMask:
    """Boolean t x t matrix; ``allow[i, j]`` lets query i attend to key j."""

    allow: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.allow, dtype=bool)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionError(f"mask must be square, got {a.shape}")
        if np.triu(a, k=1).any():
            raise DimensionError("mask allows attention to a future position")
        if not a.any(axis=1).all():
            raise DimensionError("every mask row needs an allowed position")
        object.__setattr__(self, "allow", a)

    @property
    def size(self) -> int:
        return self.allow.shape[0]

    def __eq__(self, other):
        return isinstance(other, AttentionMask) and np.array_equal(self.allow, other.allow)


def causal_mask(t: int) -> AttentionMask:
    if t < 1:
        raise ValueError("sequence length must be >= 1")
    return AttentionMask(np.tril(np.ones((t, t), dtype=bool)))


def build_session_mask(session_len: int, response_len: int) -> AttentionMask:
    """Causal over the session; response rows see position m-1 and earlier response rows.

    ``session_len`` (m) counts the session tokens including the appended
    end-of-sequence token at position m-1.
    """
    m, T = session_len, response_len
    if m < 1:
        raise ValueError("session_len must be >= 1")
    if T < 0:
        raise ValueError("response_len must be >= 0")
    allow = np.tril(np.ones((m + T, m + T), dtype=bool))
    allow[m:, : m - 1] = False
    return AttentionMask(allow)


def block_mask(blocks: Sequence[AttentionMask]) -> AttentionMask:
    """Block-diagonal composition: packed sequences never see each other."""
    n = sum(b.size for b in blocks)
    allow = np.zeros((n, n), dtype=bool)
    o = 0
    for b in blocks:
        allow[o:o + b.size, o:o + b.size] = b.allow
        o += b.size
    return AttentionMask(allow)


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, V, h = cfg.d_model, cfg.vocab_size, cfg.mlp_ratio * cfg.d_model
    shapes = {"tok_emb": (V, d), "pos_emb": (cfg.max_seq_len, d)}
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.wq": (d, d), p + "attn.wk": (d, d), p + "attn.wv": (d, d),
            p + "attn.wo": (d, d), p + "attn.bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, h), p + "mlp.b1": (h,),
            p + "mlp.w2": (h, d), p + "mlp.b2": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "lm_head": (d, V)})
    return shapes


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig) -> "ModelState":
        rng = np.random.default_rng(config.seed)
        params = {}
        for name, shape in _param_shapes(config).items():
            if name.endswith(".g"):
                arr = np.ones(shape)
            elif name.endswith((".b", ".bo", ".b1", ".b2")):
                arr = np.zeros(shape)
            else:
                arr = rng.normal(0.0, config.init_std, size=shape)
            params[name] = Tensor(arr, requires_grad=True, name=name)
        return cls(config, params)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def copy(self) -> "ModelState":
        return ModelState(self.config, {
            k: Tensor(v.values.copy(), requires_grad=True, name=k) for k, v in self.params.items()
        })

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(json.dumps(asdict(self.config), sort_keys=True).encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name].values).tobytes())
        return h.hexdigest()[:16]

    def n_parameters(self) -> int:
        return sum(p.values.size for p in self.params.values())


def save_checkpoint(state: ModelState, path: str | Path, header: dict | None = None) -> None:
    """npz container: a JSON config entry plus one array per parameter.

    ``header`` (any JSON object) is stored verbatim under ``header`` for provenance.
    """
    arrays = {f"param/{k}": v.values for k, v in state.params.items()}
    arrays["config"] = np.array(json.dumps(asdict(state.config), sort_keys=True))
    if header is not None:
        arrays["header"] = np.array(json.dumps(header, sort_keys=True))
    save_npz(path, arrays)


def load_checkpoint(path: str | Path) -> ModelState:
    with np.load(path, allow_pickle=False) as data:
        try:
            cfg = ModelConfig(**json.loads(str(data["config"])))
        except KeyError as e:
            raise IntegrityError(f"{path}: checkpoint has no config entry") from e
        params = {}
        for name, shape in _param_shapes(cfg).items():
            key = f"param/{name}"
            if key not in data:
                raise IntegrityError(f"{path}: missing parameter {name}")
            arr = data[key]
            if arr.shape != shape:
                raise IntegrityError(f"{path}: {name} has shape {arr.shape}, expected {shape}")
            params[name] = Tensor(arr, requires_grad=True, name=name)
    return ModelState(cfg, params)


# ---------------------------------------------------------------------------
# forward pass


def _check_tokens(cfg: ModelConfig, tokens: Sequence[int]) -> None:
    if len(tokens) == 0:
        raise DimensionError("empty token sequence")
    bad = [t for t in tokens if not 0 <= t < cfg.vocab_size]
    if bad:
        raise TokenIndexError(f"token id {bad[0]} outside vocabulary of {cfg.vocab_size}")


def forward(state: ModelState, tokens: Sequence[int], mask: AttentionMask,
            positions: Sequence[int] | None = None, probe: list | None = None) -> Tensor:
    """Final-norm hidden states, one row per input token.

    ``positions`` defaults to 0..t-1; packed batches pass per-sequence
    positions. ``probe`` collects every attention weight matrix, one per
    (layer, head).
    """
    cfg = state.config
    _check_tokens(cfg, tokens)
    t = len(tokens)
    if mask.size != t:
        raise DimensionError(f"mask covers {mask.size} positions, sequence has {t}")
    pos = np.arange(t) if positions is None else np.asarray(positions)
    if pos.max() >= cfg.max_seq_len:
        raise TruncationError(f"position {pos.max()} exceeds max_seq_len {cfg.max_seq_len}")
    P = state.params
    x = nx.add(nx.embedding(P["tok_emb"], tokens), nx.embedding(P["pos_emb"], pos))
    dh = cfg.d_model // cfg.n_heads
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h = nx.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
        q = nx.matmul(h, P[p + "attn.wq"])
        k = nx.matmul(h, P[p + "attn.wk"])
        v = nx.matmul(h, P[p + "attn.wv"])
        if cfg.n_heads == 1:
            a = nx.masked_attention(q, k, v, mask, probe)
        else:
            heads = []
            for j in range(cfg.n_heads):
                lo, hi = j * dh, (j + 1) * dh
                heads.append(nx.masked_attention(
                    nx.slice_cols(q, lo, hi), nx.slice_cols(k, lo, hi), nx.slice_cols(v, lo, hi),
                    mask, probe))
            a = nx.concat_cols(heads)
        x = nx.add(x, nx.add_bias(nx.matmul(a, P[p + "attn.wo"]), P[p + "attn.bo"]))
        h = nx.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
        h = nx.gelu(nx.add_bias(nx.matmul(h, P[p + "mlp.w1"]), P[p + "mlp.b1"]))
        x = nx.add(x, nx.add_bias(nx.matmul(h, P[p + "mlp.w2"]), P[p + "mlp.b2"]))
    return nx.layer_norm(x, P["ln_f.g"], P["ln_f.b"])


def next_token_logits(state: ModelState, tokens: Sequence[int], mask: AttentionMask,
                      probe: list | None = None) -> Tensor:
    if mask.size != len(tokens):
        raise DimensionError(f"mask covers {mask.size} positions, sequence has {len(tokens)}")
    return nx.matmul(forward(state, tokens, mask, probe=probe), state.params["lm_head"])


def sequence_embedding(state: ModelState, tokens: Sequence[int]) -> Tensor:
    """Hidden state at an appended end-of-sequence token, as a 1 x d tensor."""
    cfg = state.config
    if len(tokens) + 1 > cfg.max_seq_len:
        raise TruncationError(
            f"{len(tokens)} tokens + eos exceed max_seq_len {cfg.max_seq_len}; truncate first")
    seq = list(tokens) + [cfg.eos_token_id]
    hidden = forward(state, seq, causal_mask(len(seq)))
    return nx.take_rows(hidden, [len(seq) - 1])


def _packs(lengths: Sequence[int], budget: int) -> list[list[int]]:
    packs, cur, used = [], [], 0
    for i, n in enumerate(lengths):
        if cur and used + n > budget:
            packs.append(cur)
            cur, used = [], 0
        cur.append(i)
        used += n
    if cur:
        packs.append(cur)
    return packs


def embed_batch(state: ModelState, seqs: Sequence[Sequence[int]], pack_tokens: int = 512) -> Tensor:
    """Row-stacked sequence embeddings (B x d) for many sequences.

    Sequences are packed side by side under a block-diagonal causal mask, so
    each row equals ``sequence_embedding`` of its sequence up to summation
    order inside the attention softmax.
    """
    cfg = state.config
    eos = cfg.eos_token_id
    full = []
    for s in seqs:
        if len(s) + 1 > cfg.max_seq_len:
            raise TruncationError(
                f"{len(s)} tokens + eos exceed max_seq_len {cfg.max_seq_len}; truncate first")
        full.append(list(s) + [eos])
    parts = []
    for pack in _packs([len(s) for s in full], pack_tokens):
        tokens, positions, ends, blocks = [], [], [], []
        for i in pack:
            tokens.extend(full[i])
            positions.extend(range(len(full[i])))
            ends.append(len(tokens) - 1)
            blocks.append(causal_mask(len(full[i])))
        hidden = forward(state, tokens, block_mask(blocks), positions)
        parts.append(nx.take_rows(hidden, ends))
    return parts[0] if len(parts) == 1 else nx.concat_rows(parts)


def session_lm_batch(state: ModelState, contexts: Sequence[Sequence[int]],
                     targets: Sequence[Sequence[int]], pack_tokens: int = 512) -> Tensor:
    """Teacher-forced generation loss under the session mask, packed.

    For each item the input is ``context + [eos] + target`` with the session
    mask built from (len(context)+1, len(target)). Predictions at positions
    m-1 .. m+T-1 are scored against ``target + [eos]``. Returns the mean over
    items of each item's token-mean negative log-likelihood.
    """
    cfg = state.config
    eos = cfg.eos_token_id
    items = []
    for ctx, tgt in zip(contexts, targets):
        seq = list(ctx) + [eos] + list(tgt)
        if len(seq) > cfg.max_seq_len:
            raise TruncationError(f"generation item of {len(seq)} tokens exceeds max_seq_len")
        items.append((seq, len(ctx) + 1, list(tgt)))
    if not items:
        raise ValueError("no generation items")
    n_items = len(items)
    rows_parts, tgt_all, w_all = [], [], []
    for pack in _packs([len(s) for s, _, _ in items], pack_tokens):
        tokens, positions, blocks, rows = [], [], [], []
        for i in pack:
            seq, m, tgt = items[i]
            off = len(tokens)
            tokens.extend(seq)
            positions.extend(range(len(seq)))
            blocks.append(build_session_mask(m, len(tgt)))
            rows.extend(range(off + m - 1, off + len(seq)))
            tgt_all.extend(tgt + [eos])
            w_all.extend([1.0 / ((len(tgt) + 1) * n_items)] * (len(tgt) + 1))
        hidden = forward(state, tokens, block_mask(blocks), positions)
        rows_parts.append(nx.take_rows(hidden, rows))
    h = rows_parts[0] if len(rows_parts) == 1 else nx.concat_rows(rows_parts)
    logits = nx.matmul(h, state.params["lm_head"])
    return nx.cross_entropy(logits, tgt_all, weights=w_all)
