"""A small deterministic decoder-only multimodal transformer.

Hidden states are row vectors (one row per token). Each layer is pre-norm:
RMS-scaled causal multi-head self-attention followed by a SiLU-gated FFN, both
added back into the residual stream. Vision tokens arrive as synthetic
embeddings; text tokens are looked up in the embedding table. Sinusoidal
position encodings are added once at the input.

Pruning and probing plug in through :class:`PruneHooks`. Before each layer the
hook returns a :class:`LayerPlan` that can drop tokens from the sequence, mask
attention before the softmax, make rows skip attention, or edit the attention
weights after the softmax.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .kernels import MacCounter, masked_softmax, matmul, rms_norm, silu

MODALITIES = ("system", "vision", "instruction")


class StreamError(ValueError):
    pass


class StateError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int
    hidden_dim: int
    num_heads: int
    ffn_dim: int
    vocab_size: int
    seed: int = 0

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim", "vocab_size"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "hidden_dim": self.hidden_dim,
            "num_heads": self.num_heads,
            "ffn_dim": self.ffn_dim,
            "vocab_size": self.vocab_size,
            "seed": self.seed,
        }


@dataclass
class LayerWeights:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_gate: np.ndarray
    w_up: np.ndarray
    w_down: np.ndarray
    attn_norm: np.ndarray
    ffn_norm: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return dict(vars(self))


@dataclass
class Model:
    config: ModelConfig
    layers: list[LayerWeights]
    embedding: np.ndarray  # vocab x d
    unembedding: np.ndarray  # vocab x d
    pos_scale: np.ndarray  # d, multiplies the sinusoidal encoding per dimension

    def head_slice(self, head: int) -> slice:
        dk = self.config.head_dim
        return slice(head * dk, (head + 1) * dk)

    def freeze(self) -> "Model":
        for arr in self._all_arrays():
            arr.setflags(write=False)
        return self

    def _all_arrays(self):
        yield self.embedding
        yield self.unembedding
        yield self.pos_scale
        for lw in self.layers:
            yield from lw.arrays().values()

    def copy(self) -> "Model":
        """Writable deep copy (fixture builders edit weights on a copy)."""
        layers = [LayerWeights(**{k: v.copy() for k, v in lw.arrays().items()}) for lw in self.layers]
        return Model(self.config, layers, self.embedding.copy(), self.unembedding.copy(), self.pos_scale.copy())


def init_model(config: ModelConfig) -> Model:
    """Random model from ``config.seed``; every matrix is scaled by 1/sqrt(d)."""
    rng = np.random.default_rng(config.seed)
    d, m = config.hidden_dim, config.ffn_dim
    scale = 1.0 / math.sqrt(d)

    def draw(*shape):
        return rng.standard_normal(shape) * scale

    layers = []
    for _ in range(config.num_layers):
        layers.append(
            LayerWeights(
                w_q=draw(d, d),
                w_k=draw(d, d),
                w_v=draw(d, d),
                w_o=draw(d, d),
                w_gate=draw(d, m),
                w_up=draw(d, m),
                w_down=draw(m, d),
                attn_norm=np.ones(d),
                ffn_norm=np.ones(d),
            )
        )
    embedding = rng.standard_normal((config.vocab_size, d))
    unembedding = draw(config.vocab_size, d)
    return Model(config, layers, embedding, unembedding, np.ones(d)).freeze()


# -- token streams ---------------------------------------------------------


@dataclass(frozen=True)
class TokenStream:
    """Modality-tagged input: system segment, then vision, then instruction.

    ``token_ids`` holds -1 wherever the entry is given as an embedding row.
    """

    modalities: tuple[str, ...]
    token_ids: np.ndarray
    embeddings: np.ndarray

    def __post_init__(self):
        n = len(self.modalities)
        if n == 0:
            raise StreamError("token stream is empty")
        if self.token_ids.shape != (n,) or self.embeddings.shape[0] != n:
            raise StreamError("token_ids / embeddings do not match the stream length")
        order = [MODALITIES.index(m) if m in MODALITIES else -1 for m in self.modalities]
        if min(order) < 0:
            raise StreamError(f"unknown modality in {set(self.modalities)}")
        if any(b < a for a, b in zip(order, order[1:])):
            raise StreamError("segments must run system -> vision -> instruction")

    @classmethod
    def from_segments(cls, hidden_dim: int, system=(), vision=(), instruction=()) -> "TokenStream":
        """Each segment is either a sequence of token ids or an (n, d) embedding array."""
        mods, ids, rows = [], [], []
        for name, seg in (("system", system), ("vision", vision), ("instruction", instruction)):
            arr = np.asarray(seg)
            if arr.size == 0:
                continue
            if arr.ndim == 2:
                if arr.shape[1] != hidden_dim:
                    raise StreamError(f"{name} embeddings must have width {hidden_dim}")
                for row in arr:
                    mods.append(name)
                    ids.append(-1)
                    rows.append(np.asarray(row, dtype=np.float64))
            elif arr.ndim == 1:
                for tok in arr:
                    if int(tok) < 0:
                        raise StreamError("token ids must be non-negative")
                    mods.append(name)
                    ids.append(int(tok))
                    rows.append(np.zeros(hidden_dim))
            else:
                raise StreamError(f"{name} segment must be 1-D ids or 2-D embeddings")
        if not mods:
            raise StreamError("token stream is empty")
        return cls(tuple(mods), np.asarray(ids, dtype=np.int64), np.vstack(rows))

    def __len__(self) -> int:
        return len(self.modalities)

    def positions_of(self, modality: str) -> np.ndarray:
        return np.asarray([i for i, m in enumerate(self.modalities) if m == modality], dtype=np.int64)

    @property
    def vision_positions(self) -> np.ndarray:
        return self.positions_of("vision")

    @property
    def n_s(self) -> int:
        return self.modalities.count("system")

    @property
    def n_v(self) -> int:
        return self.modalities.count("vision")

    @property
    def n_x(self) -> int:
        return self.modalities.count("instruction")


def sinusoid(positions: np.ndarray, dim: int) -> np.ndarray:
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 1)
    idx = np.arange(dim)
    freq = 1.0 / (10000.0 ** ((idx - idx % 2) / dim))
    angle = positions * freq
    return np.where(idx % 2 == 0, np.sin(angle), np.cos(angle))


def embed_stream(model: Model, stream: TokenStream) -> np.ndarray:
    d = model.config.hidden_dim
    if stream.embeddings.shape[1] != d:
        raise StreamError(f"stream width {stream.embeddings.shape[1]} does not match model width {d}")
    if np.any(stream.token_ids >= model.config.vocab_size):
        raise StreamError("token id outside the vocabulary")
    x = stream.embeddings.copy()
    is_id = stream.token_ids >= 0
    x[is_id] = model.embedding[stream.token_ids[is_id]]
    return x + model.pos_scale * sinusoid(np.arange(len(stream)), d)


# -- hooks ------------------------------------------------------------------


@dataclass
class LayerPlan:
    """What a hook wants done to one layer; ``None`` everywhere is a dense layer.

    ``keep`` is applied first and permanently removes tokens from the sequence.
    ``allow`` (n x n) and ``skip_rows`` (n,) refer to the kept sequence.
    ``edit_weights`` receives and returns the (H, n, n) post-softmax weights.
    """

    keep: np.ndarray | None = None
    allow: np.ndarray | None = None
    skip_rows: np.ndarray | None = None
    edit_weights: Callable[[np.ndarray], np.ndarray] | None = None


@dataclass
class LayerContext:
    model: Model
    layer: int  # 1-based
    hidden: np.ndarray
    positions: np.ndarray
    modalities: tuple[str, ...]
    counter: MacCounter | None


class PruneHooks:
    """Identity hooks: every layer runs dense."""

    def plan_layer(self, ctx: LayerContext) -> LayerPlan:
        return LayerPlan()


@dataclass
class LayerTrace:
    layer: int
    positions: np.ndarray
    modalities: tuple[str, ...]
    weights: np.ndarray  # (H, n, n) post-softmax (post-edit) attention
    q: np.ndarray  # (n, d); zero rows for rows that skipped attention
    k: np.ndarray  # (n, d); zero rows where keys were not computed
    v: np.ndarray  # (n, d)
    o: np.ndarray  # (n, d) concatenated per-head attention output, before W_o
    hidden_in: np.ndarray
    hidden_out: np.ndarray
    kv_mask: np.ndarray  # (n,) positions whose keys/values were computed
    skip_rows: np.ndarray  # (n,)

    @property
    def value_l1(self) -> np.ndarray:
        return np.abs(self.v).sum(axis=1)

    def index_of(self, position: int) -> int:
        hits = np.flatnonzero(self.positions == position)
        if hits.size == 0:
            raise KeyError(f"position {position} not present at layer {self.layer}")
        return int(hits[0])


@dataclass
class KvCache:
    """Per-layer keys/values for the positions each layer computed."""

    positions: list[np.ndarray]
    modalities: list[tuple[str, ...]]
    keys: list[np.ndarray]  # each (n_l, d)
    values: list[np.ndarray]
    next_position: int
    consumed: bool = field(default=False, compare=False)

    @property
    def num_layers(self) -> int:
        return len(self.keys)

    def entries(self) -> int:
        """Cached key+value rows summed over layers."""
        return sum(2 * k.shape[0] for k in self.keys)


class PrefillResult(NamedTuple):
    traces: list[LayerTrace]
    logits: np.ndarray
    cache: KvCache


def empty_cache(model: Model) -> KvCache:
    d = model.config.hidden_dim
    L = model.config.num_layers
    return KvCache(
        [np.zeros(0, dtype=np.int64) for _ in range(L)],
        [() for _ in range(L)],
        [np.zeros((0, d)) for _ in range(L)],
        [np.zeros((0, d)) for _ in range(L)],
        0,
    )


def _ffn(lw: LayerWeights, h: np.ndarray, counter: MacCounter | None) -> np.ndarray:
    f = rms_norm(h, lw.ffn_norm)
    gate = matmul(f, lw.w_gate, counter)
    up = matmul(f, lw.w_up, counter)
    return matmul(silu(gate) * up, lw.w_down, counter)


def run_layer(model: Model, layer: int, hidden, positions, modalities, plan: LayerPlan, counter=None):
    """Run one transformer block under ``plan`` and return its trace."""
    cfg = model.config
    lw = model.layers[layer - 1]
    if plan.keep is not None:
        keep = np.asarray(plan.keep, dtype=bool)
        hidden, positions = hidden[keep], positions[keep]
        modalities = tuple(m for m, k in zip(modalities, keep) if k)
    n, d, H, dk = hidden.shape[0], cfg.hidden_dim, cfg.num_heads, cfg.head_dim

    allow = positions[None, :] <= positions[:, None]
    if plan.allow is not None:
        allow = allow & np.asarray(plan.allow, dtype=bool)
    skip = np.zeros(n, dtype=bool) if plan.skip_rows is None else np.asarray(plan.skip_rows, dtype=bool)
    rows = np.flatnonzero(~skip)
    cols = np.flatnonzero(allow[rows].any(axis=0)) if rows.size else np.zeros(0, dtype=np.int64)

    a = rms_norm(hidden, lw.attn_norm)
    q = np.zeros((n, d))
    k = np.zeros((n, d))
    v = np.zeros((n, d))
    weights = np.zeros((H, n, n))
    o = np.zeros((n, d))
    new_hidden = hidden.copy()
    if rows.size:
        q[rows] = matmul(a[rows], lw.w_q, counter)
        k[cols] = matmul(a[cols], lw.w_k, counter)
        v[cols] = matmul(a[cols], lw.w_v, counter)
        sub_allow = allow[np.ix_(rows, cols)]
        inv = 1.0 / math.sqrt(dk)
        for h in range(H):
            sl = model.head_slice(h)
            scores = matmul(q[rows, sl], k[cols, sl].T, counter) * inv
            weights[h][np.ix_(rows, cols)] = masked_softmax(scores, sub_allow)
        if plan.edit_weights is not None:
            weights = np.asarray(plan.edit_weights(weights), dtype=np.float64)
            outside = np.ones(n, dtype=bool)
            outside[cols] = False
            if np.any(weights[:, :, outside]) or np.any(weights[:, skip, :]):
                raise StateError("edited weights reach positions without keys")
        for h in range(H):
            sl = model.head_slice(h)
            o[rows, sl] = matmul(weights[h][np.ix_(rows, cols)], v[cols, sl], counter)
        new_hidden[rows] += matmul(o[rows], lw.w_o, counter)
    new_hidden = new_hidden + _ffn(lw, new_hidden, counter)
    kv_mask = np.zeros(n, dtype=bool)
    kv_mask[cols] = True
    trace = LayerTrace(layer, positions, modalities, weights, q, k, v, o, hidden, new_hidden, kv_mask, skip)
    return trace


def unembed(model: Model, hidden_row: np.ndarray, counter: MacCounter | None = None) -> np.ndarray:
    return matmul(np.asarray(hidden_row).reshape(1, -1), model.unembedding.T, counter)[0]


def prefill(
    model: Model,
    stream: TokenStream,
    hooks: PruneHooks | None = None,
    counter: MacCounter | None = None,
) -> PrefillResult:
    """Single forward pass over the whole stream.

    Returns every layer's trace, the logits of the last position and the KV
    cache. The last token must survive every ``keep``.
    """
    if len(stream) == 0:
        raise StreamError("token stream is empty")
    hooks = hooks or PruneHooks()
    hidden = embed_stream(model, stream)
    positions = np.arange(len(stream))
    modalities = stream.modalities
    last = len(stream) - 1
    traces = []
    cache = empty_cache(model)
    for layer in range(1, model.config.num_layers + 1):
        ctx = LayerContext(model, layer, hidden, positions, modalities, counter)
        plan = hooks.plan_layer(ctx)
        tr = run_layer(model, layer, hidden, positions, modalities, plan, counter)
        if tr.positions[-1] != last:
            raise StateError("the last input token cannot be dropped")
        traces.append(tr)
        cache.positions[layer - 1] = tr.positions[tr.kv_mask]
        cache.modalities[layer - 1] = tuple(m for m, kv in zip(tr.modalities, tr.kv_mask) if kv)
        cache.keys[layer - 1] = tr.k[tr.kv_mask]
        cache.values[layer - 1] = tr.v[tr.kv_mask]
        hidden, positions, modalities = tr.hidden_out, tr.positions, tr.modalities
    cache.next_position = len(stream)
    logits = unembed(model, hidden[-1], counter)
    return PrefillResult(traces, logits, cache)


def decode_step(model: Model, cache: KvCache, token, counter: MacCounter | None = None, return_weights: bool = False):
    """Feed one new token (id or d-vector) against ``cache``.

    Returns ``(logits, new_cache)``, plus the per-layer attention rows
    ``[(positions, (H, n) weights), ...]`` when ``return_weights`` is set.
    The input cache is consumed; reusing it raises :class:`StateError`.
    """
    cfg = model.config
    if cache.consumed:
        raise StateError("KV cache was already advanced by an earlier decode step")
    if cache.num_layers != cfg.num_layers:
        raise StateError(f"cache has {cache.num_layers} layers, model has {cfg.num_layers}")
    d, H, dk = cfg.hidden_dim, cfg.num_heads, cfg.head_dim
    pos = cache.next_position
    if np.ndim(token) == 0:
        if not 0 <= int(token) < cfg.vocab_size:
            raise StreamError("token id outside the vocabulary")
        x = model.embedding[int(token)].copy()
    else:
        x = np.asarray(token, dtype=np.float64).copy()
        if x.shape != (d,):
            raise StreamError(f"decode embedding must have shape ({d},)")
    x = (x + model.pos_scale * sinusoid([pos], d)[0]).reshape(1, d)

    new = KvCache([], [], [], [], pos + 1)
    rows_seen = []
    inv = 1.0 / math.sqrt(dk)
    for layer in range(1, cfg.num_layers + 1):
        lw = model.layers[layer - 1]
        a = rms_norm(x, lw.attn_norm)
        q = matmul(a, lw.w_q, counter)
        keys = np.vstack([cache.keys[layer - 1], matmul(a, lw.w_k, counter)])
        vals = np.vstack([cache.values[layer - 1], matmul(a, lw.w_v, counter)])
        o = np.zeros((1, d))
        w_layer = np.zeros((H, keys.shape[0]))
        for h in range(H):
            sl = model.head_slice(h)
            w = masked_softmax(matmul(q[:, sl], keys[:, sl].T, counter) * inv)
            w_layer[h] = w[0]
            o[:, sl] = matmul(w, vals[:, sl], counter)
        x = x + matmul(o, lw.w_o, counter)
        x = x + _ffn(lw, x, counter)
        positions = np.append(cache.positions[layer - 1], pos)
        new.positions.append(positions)
        new.modalities.append(cache.modalities[layer - 1] + ("instruction",))
        new.keys.append(keys)
        new.values.append(vals)
        rows_seen.append((positions, w_layer))
    cache.consumed = True
    logits = unembed(model, x[0], counter)
    if return_weights:
        return logits, new, rows_seen
    return logits, new


def greedy_generate(model: Model, stream: TokenStream, steps: int, hooks: PruneHooks | None = None) -> list[int]:
    """Greedy argmax continuation; used by demos."""
    res = prefill(model, stream, hooks)
    logits, cache = res.logits, res.cache
    out = []
    for _ in range(steps):
        tok = int(np.argmax(logits))
        out.append(tok)
        logits, cache = decode_step(model, cache, tok)
    return out


def layer_attention_rows(trace: LayerTrace, row_position: int) -> np.ndarray:
    """(H, n) attention of one query position at this layer."""
    return trace.weights[:, trace.index_of(row_position), :]


def stack_hidden_last(traces: Sequence[LayerTrace]) -> np.ndarray:
    """(L, d) last-position hidden state after each layer."""
    return np.vstack([t.hidden_out[-1] for t in traces])
