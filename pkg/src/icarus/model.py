"""Model definition: frozen base weights, low-rank adapters, KV cache.

The transformer is factored into two roles that share one parameter
store. The base weights are the sole producer of keys and values; the
adapter side only ever contributes to queries, output projections and
the FFN. That separation is structural: there is no code path that
applies an adapter to wk or wv, and the cache refuses appends sourced
from the decoder branch.

Layout conventions. Hidden states are [rows, hidden_dim]. Projections
store weights as [in, out] so rows multiply from the left. Head h of a
projection output occupies columns [h*head_dim, (h+1)*head_dim); the
same column grouping applies to kv groups. The KV cache keeps per-layer
arrays [capacity, num_kv_heads, head_dim], append-only.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Iterator, NamedTuple

import numpy as np

from . import tensor as T
from .errors import (CapacityError, ConfigError, ContractViolationError,
                     ModeError, ShapeError, StateError)
from .metrics import Ledger
from .tensor import Tensor

DECODER_TARGETS = ("q", "o", "gate", "up", "down")
CONVENTIONAL_TARGETS = ("q", "k", "v", "o", "gate", "up", "down")


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 4
    hidden_dim: int = 64
    num_heads: int = 4
    num_kv_heads: int = 2
    head_dim: int = 16
    ffn_dim: int = 256
    vocab_size: int = 256
    rope_theta: float = 10000.0
    rms_eps: float = 1e-6
    precision: str = "f32"

    def __post_init__(self):
        for name in ("num_layers", "hidden_dim", "num_heads", "num_kv_heads",
                     "head_dim", "ffn_dim", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.num_heads % self.num_kv_heads != 0:
            raise ConfigError(
                f"num_heads {self.num_heads} not divisible by num_kv_heads {self.num_kv_heads}")
        if self.hidden_dim != self.num_heads * self.head_dim:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} != num_heads*head_dim "
                f"{self.num_heads * self.head_dim}")
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be even for rotary embedding, got {self.head_dim}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.rms_eps <= 0 or self.rope_theta <= 0:
            raise ConfigError("rms_eps and rope_theta must be positive")

    @property
    def dtype(self) -> np.dtype:
        return T.F64 if self.precision == "f64" else T.F32

    @property
    def q_dim(self) -> int:
        return self.num_heads * self.head_dim

    @property
    def kv_dim(self) -> int:
        return self.num_kv_heads * self.head_dim

    @property
    def kv_bytes_per_token(self) -> int:
        return self.num_layers * 2 * self.kv_dim * self.dtype.itemsize

    def canonical_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class LayerWeights(NamedTuple):
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    gate: Tensor
    up: Tensor
    down: Tensor
    attn_gain: Tensor
    ffn_gain: Tensor


class BaseWeights:
    """Frozen parameter store with a content hash as freeze witness.

    Arrays are write-protected at construction; `freeze_hash` can be
    recomputed at any point to prove no byte changed.
    """

    def __init__(self, config: ModelConfig, embed: np.ndarray,
                 layers: list[dict[str, np.ndarray]], final_gain: np.ndarray,
                 lm_head: np.ndarray):
        self.config = config

        def freeze(arr: np.ndarray) -> Tensor:
            arr = np.ascontiguousarray(arr, dtype=config.dtype)
            arr.setflags(write=False)
            return Tensor(arr, trainable=False)

        self.embed = freeze(embed)
        self.layers: list[LayerWeights] = []
        for raw in layers:
            self.layers.append(LayerWeights(**{k: freeze(v) for k, v in raw.items()}))
        self.final_gain = freeze(final_gain)
        self.lm_head = freeze(lm_head)
        self.freeze_hash = self.content_hash()

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield "embed", self.embed
        for i, layer in enumerate(self.layers):
            for name, t in zip(LayerWeights._fields, layer):
                yield f"layers.{i}.{name}", t
        yield "final_gain", self.final_gain
        yield "lm_head", self.lm_head

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.config.canonical_json().encode())
        for name, t in self.named():
            h.update(name.encode())
            h.update(str(t.data.shape).encode())
            h.update(t.data.dtype.str.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()

    def verify_frozen(self) -> bool:
        if self.content_hash() != self.freeze_hash:
            return False
        return all(not t.data.flags.writeable for _, t in self.named())


def init_base(config: ModelConfig, seed: int) -> BaseWeights:
    """Seeded normal init, each matrix scaled by 1/sqrt(fan_in).

    The draw order is fixed (embed, then per-layer projections, then the
    LM head) so a seed pins every byte.
    """
    rng = np.random.default_rng(seed)
    dt = config.dtype

    def draw(fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
        return (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dt)

    d, qd, kvd, f = config.hidden_dim, config.q_dim, config.kv_dim, config.ffn_dim
    embed = draw(d, (config.vocab_size, d))
    layers = []
    for _ in range(config.num_layers):
        layers.append({
            "wq": draw(d, (d, qd)),
            "wk": draw(d, (d, kvd)),
            "wv": draw(d, (d, kvd)),
            "wo": draw(qd, (qd, d)),
            "gate": draw(d, (d, f)),
            "up": draw(d, (d, f)),
            "down": draw(f, (f, d)),
            "attn_gain": np.ones(d, dtype=dt),
            "ffn_gain": np.ones(d, dtype=dt),
        })
    lm_head = draw(d, (d, config.vocab_size))
    return BaseWeights(config, embed, layers, np.ones(d, dtype=dt), lm_head)


@dataclass
class LowRankPair:
    a: Tensor  # [rank, in_dim]
    b: Tensor  # [out_dim, rank]


def _target_dims(config: ModelConfig, target: str) -> tuple[int, int]:
    d, qd, kvd, f = config.hidden_dim, config.q_dim, config.kv_dim, config.ffn_dim
    dims = {"q": (d, qd), "k": (d, kvd), "v": (d, kvd), "o": (qd, d),
            "gate": (d, f), "up": (d, f), "down": (f, d)}
    if target not in dims:
        raise ConfigError(f"unknown adapter target {target!r}; valid: {sorted(dims)}")
    return dims[target]


class AdapterSet:
    """Per-layer low-rank pairs for a fixed set of projection targets.

    The decoder-side target set cannot name wk, wv, embeddings, norms or
    the LM head; those simply have no slot here. A conventional set may
    add k and v, which is exactly what makes its cache non-shareable.
    """

    def __init__(self, config: ModelConfig, rank: int, alpha: float,
                 targets: tuple[str, ...], layers: list[dict[str, LowRankPair]],
                 task: str = ""):
        if rank < 1:
            raise ConfigError(f"adapter rank must be positive, got {rank}")
        for t in targets:
            _target_dims(config, t)
        if len(layers) != config.num_layers:
            raise ConfigError(
                f"adapter layer count {len(layers)} != model layers {config.num_layers}")
        self.config = config
        self.rank = rank
        self.alpha = alpha
        self.targets = tuple(targets)
        self.layers = layers
        self.task = task

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    @classmethod
    def init(cls, config: ModelConfig, rank: int = 8, alpha: float = 16.0,
             targets: tuple[str, ...] = DECODER_TARGETS, seed: int = 0,
             task: str = "") -> "AdapterSet":
        """A seeded-normal init for each A and zeros for each B.

        Zero B makes every adapted projection start out bitwise equal to
        its base projection.
        """
        rng = np.random.default_rng(seed)
        dt = config.dtype
        layers = []
        for _ in range(config.num_layers):
            per = {}
            for t in targets:
                in_dim, out_dim = _target_dims(config, t)
                a = (rng.standard_normal((rank, in_dim)) / np.sqrt(in_dim)).astype(dt)
                b = np.zeros((out_dim, rank), dtype=dt)
                per[t] = LowRankPair(Tensor(a, trainable=True), Tensor(b, trainable=True))
            layers.append(per)
        return cls(config, rank, alpha, targets, layers, task)

    def pair(self, layer: int, target: str) -> LowRankPair | None:
        return self.layers[layer].get(target)

    def named_params(self) -> Iterator[tuple[str, Tensor]]:
        for i, per in enumerate(self.layers):
            for t in sorted(per):
                yield f"layers.{i}.{t}.a", per[t].a
                yield f"layers.{i}.{t}.b", per[t].b

    def params(self) -> list[Tensor]:
        return [p for _, p in self.named_params()]


class KvCacheTensor:
    """Append-only per-layer K/V storage.

    Appends must come from the encoder branch; anything else is a
    contract violation, not an argument error. Written positions are
    never rewritten, so views handed out earlier stay valid bytes.
    """

    def __init__(self, config: ModelConfig, capacity: int):
        if capacity < 1:
            raise ConfigError(f"cache capacity must be positive, got {capacity}")
        self.config = config
        self.capacity = capacity
        shape = (capacity, config.num_kv_heads, config.head_dim)
        self._k = [np.zeros(shape, dtype=config.dtype) for _ in range(config.num_layers)]
        self._v = [np.zeros(shape, dtype=config.dtype) for _ in range(config.num_layers)]
        self._lengths = [0] * config.num_layers

    def length(self, layer: int = 0) -> int:
        return self._lengths[layer]

    @property
    def position_count(self) -> int:
        # Between forward passes all layers agree; use layer 0 as truth.
        return self._lengths[0]

    def append_block(self, layer: int, k: np.ndarray, v: np.ndarray,
                     source_branch: int) -> None:
        if source_branch != 0:
            raise ContractViolationError(
                f"KV append from branch {source_branch}; only the encoder branch "
                "(0) may produce cache entries")
        expect = (self.config.num_kv_heads, self.config.head_dim)
        if k.ndim != 3 or k.shape[1:] != expect or v.shape != k.shape:
            raise ShapeError(f"append expects [n,{expect[0]},{expect[1]}] pairs, "
                             f"got k {k.shape} v {v.shape}")
        n = k.shape[0]
        at = self._lengths[layer]
        if at + n > self.capacity:
            raise CapacityError(f"cache layer {layer} at {at}/{self.capacity} "
                                f"cannot take {n} more positions")
        self._k[layer][at:at + n] = k
        self._v[layer][at:at + n] = v
        self._lengths[layer] = at + n

    def view(self, layer: int) -> tuple[Tensor, Tensor]:
        """Current K/V for one layer as [T, kv_dim] tensors (no copy)."""
        t = self._lengths[layer]
        if t == 0:
            raise StateError(f"cache layer {layer} is empty")
        kv_dim = self.config.kv_dim
        return (Tensor(self._k[layer][:t].reshape(t, kv_dim)),
                Tensor(self._v[layer][:t].reshape(t, kv_dim)))

    def rows(self, layer: int, start: int, stop: int) -> tuple[np.ndarray, np.ndarray]:
        """Copies of written rows, for block extraction."""
        if not (0 <= start < stop <= self._lengths[layer]):
            raise ShapeError(f"rows [{start}:{stop}] outside written range "
                             f"[0:{self._lengths[layer]}]")
        return self._k[layer][start:stop].copy(), self._v[layer][start:stop].copy()

    def fingerprint(self) -> str:
        """Content hash of every written position, all layers."""
        h = hashlib.sha256()
        for layer in range(self.config.num_layers):
            t = self._lengths[layer]
            h.update(self._k[layer][:t].tobytes())
            h.update(self._v[layer][:t].tobytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# Projection ops


def base_linear(x: Tensor, w: Tensor, ledger: Ledger | None = None) -> Tensor:
    if ledger is not None:
        ledger.param_matrix_reads += 1
    return T.matmul(x, w)


def _lowrank_delta(x: Tensor, pair: LowRankPair, scaling: float) -> Tensor:
    down = T.matmul(x, T.transpose(pair.a))
    up = T.matmul(down, T.transpose(pair.b))
    return T.scale(up, scaling)


def adapted_linear(x: Tensor, w: Tensor, pair: LowRankPair | None, scaling: float,
                   ledger: Ledger | None = None) -> Tensor:
    """Base projection plus low-rank contribution on every row."""
    y = base_linear(x, w, ledger)
    if pair is None:
        return y
    return T.add(y, _lowrank_delta(x, pair, scaling))


def icarus_linear(x_pair: Tensor, w: Tensor, pair: LowRankPair | None, scaling: float,
                  ledger: Ledger | None = None) -> Tensor:
    """Fused pair projection: one weight read, adapter on branch 1 only.

    x_pair is [2, in_dim], row 0 the encoder branch and row 1 the
    decoder branch. The base matrix multiplies both rows in a single
    call (hence a single parameter-read event); the low-rank term
    scaling * (x1 @ A^T @ B^T) is added to row 1 alone.
    """
    if x_pair.data.ndim != 2 or x_pair.shape[0] != 2:
        raise ShapeError(f"icarus_linear needs a [2, in_dim] pair, got {x_pair.shape}")
    y = base_linear(x_pair, w, ledger)
    if pair is None:
        return y
    x1 = T.slice_rows(x_pair, 1, 2)
    adapted = T.add(T.slice_rows(y, 1, 2), _lowrank_delta(x1, pair, scaling))
    return T.concat_rows([T.slice_rows(y, 0, 1), adapted])


# ---------------------------------------------------------------------------
# Attention


def causal_mask(query_positions: np.ndarray, key_count: int, dtype) -> Tensor:
    """Additive mask: NEG_MASK where key index exceeds the query position."""
    bad = np.arange(key_count)[None, :] > query_positions[:, None]
    return Tensor(np.where(bad, dtype.type(T.NEG_MASK), dtype.type(0.0)))


def layer_attention(q: Tensor, k: Tensor, v: Tensor, query_positions,
                    config: ModelConfig) -> Tensor:
    """Grouped-query attention for H or 2H query heads.

    q is [S, n_heads*head_dim]; k and v are [T, num_kv_heads*head_dim].
    In the fused 2H case heads H..2H-1 are the decoder branch and reuse
    the groups of their logical head (h mod H), so a 2H call equals two
    H calls on the same cache, concatenated. Heads are processed one at
    a time in index order; nothing about a head depends on how many
    other heads ride along.
    """
    dk = config.head_dim
    h_base, h_kv = config.num_heads, config.num_kv_heads
    if q.data.ndim != 2 or q.shape[1] % dk != 0:
        raise ShapeError(f"q shape {q.shape} is not a multiple of head_dim {dk}")
    n_heads = q.shape[1] // dk
    if n_heads not in (h_base, 2 * h_base):
        raise ModeError(f"query head count {n_heads} must be {h_base} or {2 * h_base}")
    if k.shape != v.shape or k.data.ndim != 2 or k.shape[1] != config.kv_dim:
        raise ShapeError(f"k/v shapes {k.shape}/{v.shape} do not match kv_dim {config.kv_dim}")
    key_count = k.shape[0]
    if key_count < 1:
        raise StateError("attention over an empty cache")
    qpos = np.atleast_1d(np.asarray(query_positions, dtype=np.int64))
    if qpos.shape[0] != q.shape[0]:
        raise ShapeError(f"{qpos.shape[0]} query positions for {q.shape[0]} rows")
    if qpos.max() >= key_count:
        raise StateError(f"query position {qpos.max()} has no key (cache length {key_count})")

    mask = causal_mask(qpos, key_count, q.dtype)
    group_size = h_base // h_kv
    inv_sqrt = 1.0 / float(np.sqrt(dk))
    outputs = []
    for head in range(n_heads):
        group = (head % h_base) // group_size
        qh = T.slice_cols(q, head * dk, (head + 1) * dk)
        kg = T.slice_cols(k, group * dk, (group + 1) * dk)
        vg = T.slice_cols(v, group * dk, (group + 1) * dk)
        scores = T.add(T.scale(T.matmul(qh, T.transpose(kg)), inv_sqrt), mask)
        weights = T.softmax_lastdim(scores)
        outputs.append(T.matmul(weights, vg))
    return T.concat_cols(outputs)


def _rope_heads(x: Tensor, n_heads: int, positions, config: ModelConfig) -> Tensor:
    dk = config.head_dim
    parts = []
    for h in range(n_heads):
        parts.append(T.rope_apply(T.slice_cols(x, h * dk, (h + 1) * dk),
                                  positions, config.rope_theta))
    return T.concat_cols(parts)


# ---------------------------------------------------------------------------
# Transformer blocks


def block_forward(x: Tensor, layer: int, base: BaseWeights,
                  adapter: AdapterSet | None, cache: KvCacheTensor, mode: str,
                  positions, ledger: Ledger | None = None) -> Tensor:
    """One layer, either batched base-only prefill or fused pair decode.

    prefill: x is [S, hidden]; every row is encoder work, adapters are
    ignored by construction and S new cache positions appear.
    decode: x is [2, hidden]; K/V for the single new position come from
    row 0 before attention, so both branches attend to it.
    """
    cfg = base.config
    lw = base.layers[layer]
    scaling = adapter.scaling if adapter is not None else 0.0

    def pair(target: str) -> LowRankPair | None:
        return adapter.pair(layer, target) if adapter is not None else None

    pos = np.atleast_1d(np.asarray(positions, dtype=np.int64))
    if cache.length(layer) != pos[0]:
        raise StateError(f"layer {layer} cache length {cache.length(layer)} "
                         f"does not match first position {pos[0]}")

    if mode == "prefill":
        h = T.rms_norm(x, lw.attn_gain, cfg.rms_eps)
        k = _rope_heads(base_linear(h, lw.wk, ledger), cfg.num_kv_heads, pos, cfg)
        v = base_linear(h, lw.wv, ledger)
        s = x.shape[0]
        cache.append_block(layer,
                           k.data.reshape(s, cfg.num_kv_heads, cfg.head_dim),
                           v.data.reshape(s, cfg.num_kv_heads, cfg.head_dim),
                           source_branch=0)
        q = _rope_heads(base_linear(h, lw.wq, ledger), cfg.num_heads, pos, cfg)
        kv, vv = cache.view(layer)
        att = layer_attention(q, kv, vv, pos, cfg)
        x = T.add(x, base_linear(att, lw.wo, ledger))
        h2 = T.rms_norm(x, lw.ffn_gain, cfg.rms_eps)
        f = T.mul(T.silu(base_linear(h2, lw.gate, ledger)), base_linear(h2, lw.up, ledger))
        return T.add(x, base_linear(f, lw.down, ledger))

    if mode == "decode":
        if x.shape[0] != 2:
            raise ShapeError(f"decode mode expects a [2, hidden] pair, got {x.shape}")
        if pos.shape[0] != 1:
            raise ShapeError(f"decode mode takes one position, got {pos.shape[0]}")
        h = T.rms_norm(x, lw.attn_gain, cfg.rms_eps)
        h0 = T.slice_rows(h, 0, 1)
        # K/V are encoder-branch work only: computed from row 0, appended
        # before attention so both branches see the current position.
        k = _rope_heads(base_linear(h0, lw.wk, ledger), cfg.num_kv_heads, pos, cfg)
        v = base_linear(h0, lw.wv, ledger)
        cache.append_block(layer,
                           k.data.reshape(1, cfg.num_kv_heads, cfg.head_dim),
                           v.data.reshape(1, cfg.num_kv_heads, cfg.head_dim),
                           source_branch=0)
        q = icarus_linear(h, lw.wq, pair("q"), scaling, ledger)
        q = _rope_heads(q, cfg.num_heads, np.repeat(pos, 2), cfg)
        q2h = T.concat_cols([T.slice_rows(q, 0, 1), T.slice_rows(q, 1, 2)])
        kv, vv = cache.view(layer)
        att = layer_attention(q2h, kv, vv, pos, cfg)
        att_pair = T.concat_rows([T.slice_cols(att, 0, cfg.q_dim),
                                  T.slice_cols(att, cfg.q_dim, 2 * cfg.q_dim)])
        x = T.add(x, icarus_linear(att_pair, lw.wo, pair("o"), scaling, ledger))
        h2 = T.rms_norm(x, lw.ffn_gain, cfg.rms_eps)
        f = T.mul(T.silu(icarus_linear(h2, lw.gate, pair("gate"), scaling, ledger)),
                  icarus_linear(h2, lw.up, pair("up"), scaling, ledger))
        return T.add(x, icarus_linear(f, lw.down, pair("down"), scaling, ledger))

    raise ModeError(f"block mode must be prefill or decode, got {mode!r}")


def decoder_block_readonly(x: Tensor, layer: int, base: BaseWeights,
                           adapter: AdapterSet | None, cache: KvCacheTensor,
                           position: int, ledger: Ledger | None = None) -> Tensor:
    """Decoder pass of the sequential two-pass decode.

    Consumes the cache (which already holds the current position) and
    never writes it. x is [1, hidden].
    """
    cfg = base.config
    lw = base.layers[layer]
    scaling = adapter.scaling if adapter is not None else 0.0

    def pair(target: str) -> LowRankPair | None:
        return adapter.pair(layer, target) if adapter is not None else None

    if cache.length(layer) != position + 1:
        raise StateError(f"readonly decode at position {position} needs cache length "
                         f"{position + 1}, layer {layer} has {cache.length(layer)}")
    h = T.rms_norm(x, lw.attn_gain, cfg.rms_eps)
    q = adapted_linear(h, lw.wq, pair("q"), scaling, ledger)
    q = _rope_heads(q, cfg.num_heads, [position], cfg)
    kv, vv = cache.view(layer)
    att = layer_attention(q, kv, vv, [position], cfg)
    x = T.add(x, adapted_linear(att, lw.wo, pair("o"), scaling, ledger))
    h2 = T.rms_norm(x, lw.ffn_gain, cfg.rms_eps)
    f = T.mul(T.silu(adapted_linear(h2, lw.gate, pair("gate"), scaling, ledger)),
              adapted_linear(h2, lw.up, pair("up"), scaling, ledger))
    return T.add(x, adapted_linear(f, lw.down, pair("down"), scaling, ledger))
