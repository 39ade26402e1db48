"""Generation sessions: prefill plus three decode paths.

A session owns a private append-only cache. Prefill is always encoder
work: it never consults adapters, and its first emitted token is the
bare base model's greedy choice. Decoding then runs either fused (one
batched pair per step, one parameter sweep) or sequential (encoder pass
then decoder pass, two parameter sweeps); the two paths compute the
same values and the tests hold them to it. A plain base step exists as
the oracle for encoder-purity comparisons.

Greedy sampling everywhere: argmax with ties broken toward the lowest
token id (np.argmax returns the first maximum).
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import (CapacityError, ConfigError, ContractViolationError,
                     ModeError, StateError)
from .metrics import Ledger
from .model import (AdapterSet, BaseWeights, DECODER_TARGETS, KvCacheTensor,
                    base_linear, block_forward, decoder_block_readonly)


class GenerationSession:
    """One sequence in flight: cache, counters, per-position base hiddens.

    `final_hidden` keeps the final-norm encoder hidden for every
    position this session computed itself; block commits read it to
    derive chunk-boundary next-token predictions.
    """

    def __init__(self, base: BaseWeights, adapter: AdapterSet | None,
                 max_context: int, ledger: Ledger | None = None):
        if adapter is not None:
            bad = set(adapter.targets) - set(DECODER_TARGETS)
            if bad:
                raise ContractViolationError(
                    f"adapter targets {sorted(bad)} cannot ride a shared cache; "
                    f"decoder-side targets are {DECODER_TARGETS}")
            if adapter.config != base.config:
                raise ConfigError("adapter was built for a different model config")
        if max_context < 1:
            raise ConfigError(f"max_context must be positive, got {max_context}")
        self.base = base
        self.adapter = adapter
        self.config = base.config
        self.max_context = max_context
        self.cache = KvCacheTensor(base.config, max_context)
        self.ledger = ledger if ledger is not None else Ledger()
        self.prompt: list[int] = []
        self.produced: list[int] = []
        self.final_hidden: dict[int, np.ndarray] = {}
        self.last_logits: np.ndarray | None = None
        self.borrowed_chain: list = []
        self._prefilled = False


def new_session(base: BaseWeights, adapter: AdapterSet | None = None,
                max_context: int = 512, ledger: Ledger | None = None) -> GenerationSession:
    return GenerationSession(base, adapter, max_context, ledger)


def _check_tokens(session: GenerationSession, tokens) -> list[int]:
    toks = [int(t) for t in tokens]
    vocab = session.config.vocab_size
    for t in toks:
        if not (0 <= t < vocab):
            raise IndexError(f"token {t} outside vocab [0, {vocab})")
    return toks


def _argmax(logits: np.ndarray) -> int:
    return int(np.argmax(logits))


def _final_logits(session: GenerationSession, hidden_row: T.Tensor) -> np.ndarray:
    logits = base_linear(hidden_row, session.base.lm_head, session.ledger)
    return logits.data[0]


def prefill(session: GenerationSession, prompt, pool=None, namespace: str | None = None,
            reader: str | None = None) -> int:
    """Run the prompt through the encoder and emit the first token.

    With a pool attached, the longest indexed block-prefix is installed
    into the session cache byte-for-byte and only the remaining suffix
    is computed; the prefill-token counter counts computed positions
    only. A full-block hit emits the chunk-end prediction stored in the
    final block and computes nothing.
    """
    if session._prefilled:
        raise StateError("session already prefilled")
    toks = _check_tokens(session, prompt)
    if not toks:
        raise ValueError("prompt must contain at least one token")
    if len(toks) > session.max_context:
        raise CapacityError(f"prompt length {len(toks)} exceeds max context "
                            f"{session.max_context}")
    cfg = session.config
    matched = 0
    chain: list = []
    if pool is not None:
        matched, chain = pool.lookup(namespace, toks, reader=reader)
        if chain:
            for layer in range(cfg.num_layers):
                k = np.concatenate([blk.k[layer] for blk in chain], axis=0)
                v = np.concatenate([blk.v[layer] for blk in chain], axis=0)
                session.cache.append_block(layer, k, v, source_branch=0)
            session.borrowed_chain = chain
        session.ledger.prefix_hit_tokens += matched

    suffix = toks[matched:]
    if suffix:
        x = T.gather_rows(session.base.embed, suffix)
        positions = np.arange(matched, len(toks), dtype=np.int64)
        for layer in range(cfg.num_layers):
            x = block_forward(x, layer, session.base, None, session.cache,
                              "prefill", positions, session.ledger)
        final = T.rms_norm(x, session.base.final_gain, cfg.rms_eps)
        for row, pos in enumerate(positions):
            session.final_hidden[int(pos)] = final.data[row].copy()
        logits = _final_logits(session, T.slice_rows(final, len(suffix) - 1, len(suffix)))
        session.ledger.prefill_tokens += len(suffix)
        session.ledger.kv_bytes_written += len(suffix) * cfg.kv_bytes_per_token
        token = _argmax(logits)
        session.last_logits = logits.copy()
    else:
        # Every position came from the pool. The final block carries the
        # base model's next-token prediction for its chunk end; if an
        # older container lacks it, replay just the last position
        # read-only and account for that single computed token.
        stored = chain[-1].next_token if chain else None
        if stored is not None:
            token = int(stored)
            session.last_logits = None
        else:
            x = T.gather_rows(session.base.embed, [toks[-1]])
            for layer in range(cfg.num_layers):
                x = decoder_block_readonly(x, layer, session.base, None,
                                           session.cache, len(toks) - 1, session.ledger)
            final = T.rms_norm(x, session.base.final_gain, cfg.rms_eps)
            logits = _final_logits(session, final)
            session.ledger.prefill_tokens += 1
            token = _argmax(logits)
            session.last_logits = logits.copy()

    session.prompt = toks
    session.produced = [token]
    session._prefilled = True
    return token


def _pre_step(session: GenerationSession, token: int) -> int:
    if not session._prefilled:
        raise StateError("decode before prefill")
    _check_tokens(session, [token])
    pos = session.cache.position_count
    if pos + 1 > session.max_context:
        raise CapacityError(f"context full at {pos}/{session.max_context}")
    return pos


def _account_step(session: GenerationSession, pos: int, passes: int) -> None:
    led = session.ledger
    cfg = session.config
    led.decode_steps += 1
    led.param_passes += passes
    # One KV-read event per step on every path: the counter tracks
    # unique cached bytes consumed, and both passes of the sequential
    # path walk the same bytes.
    led.kv_read_events += 1
    led.kv_bytes_read += (pos + 1) * cfg.kv_bytes_per_token
    led.kv_bytes_written += cfg.kv_bytes_per_token


def decode_step_fused(session: GenerationSession, token: int) -> int:
    """One fused pair step: both branches advance in a single sweep."""
    pos = _pre_step(session, token)
    cfg = session.config
    x0 = T.gather_rows(session.base.embed, [token])
    pair = T.concat_rows([x0, x0])
    for layer in range(cfg.num_layers):
        pair = block_forward(pair, layer, session.base, session.adapter,
                             session.cache, "decode", [pos], session.ledger)
    final = T.rms_norm(pair, session.base.final_gain, cfg.rms_eps)
    session.final_hidden[pos] = final.data[0].copy()
    logits = _final_logits(session, T.slice_rows(final, 1, 2))
    _account_step(session, pos, passes=1)
    session.last_logits = logits.copy()
    return _argmax(logits)


def decode_step_sequential(session: GenerationSession, token: int) -> int:
    """Oracle path: full encoder pass, then a read-only decoder pass."""
    pos = _pre_step(session, token)
    cfg = session.config
    x0 = T.gather_rows(session.base.embed, [token])
    for layer in range(cfg.num_layers):
        x0 = block_forward(x0, layer, session.base, None, session.cache,
                           "prefill", [pos], session.ledger)
    final0 = T.rms_norm(x0, session.base.final_gain, cfg.rms_eps)
    session.final_hidden[pos] = final0.data[0].copy()

    x1 = T.gather_rows(session.base.embed, [token])
    for layer in range(cfg.num_layers):
        x1 = decoder_block_readonly(x1, layer, session.base, session.adapter,
                                    session.cache, pos, session.ledger)
    final1 = T.rms_norm(x1, session.base.final_gain, cfg.rms_eps)
    logits = _final_logits(session, final1)
    _account_step(session, pos, passes=2)
    session.last_logits = logits.copy()
    return _argmax(logits)


def decode_step_base(session: GenerationSession, token: int) -> int:
    """Standalone bare-base step; the comparison target for branch 0."""
    if session.adapter is not None:
        raise StateError("base decode on a session that carries an adapter")
    pos = _pre_step(session, token)
    cfg = session.config
    x = T.gather_rows(session.base.embed, [token])
    for layer in range(cfg.num_layers):
        x = block_forward(x, layer, session.base, None, session.cache,
                          "prefill", [pos], session.ledger)
    final = T.rms_norm(x, session.base.final_gain, cfg.rms_eps)
    session.final_hidden[pos] = final.data[0].copy()
    logits = _final_logits(session, final)
    _account_step(session, pos, passes=1)
    session.last_logits = logits.copy()
    return _argmax(logits)


_STEPS = {"fused": decode_step_fused, "sequential": decode_step_sequential}


def generate(session: GenerationSession, prompt, max_new: int, path: str = "fused",
             pool=None, namespace: str | None = None, reader: str | None = None,
             end_token: int | None = None) -> list[int]:
    """Prefill then greedy-decode up to max_new tokens (first one included)."""
    if max_new < 1:
        raise ValueError(f"max_new must be at least 1, got {max_new}")
    if path not in _STEPS:
        raise ModeError(f"decode path must be one of {sorted(_STEPS)}, got {path!r}")
    step = _STEPS[path]
    out = [prefill(session, prompt, pool=pool, namespace=namespace, reader=reader)]
    while len(out) < max_new and out[-1] != end_token:
        out.append(step(session, out[-1]))
    session.produced = list(out)
    return out


def replay_base(base: BaseWeights, tokens, prompt_len: int,
                max_context: int | None = None,
                ledger: Ledger | None = None) -> GenerationSession:
    """Force the bare base model over a fixed token sequence.

    Prefills tokens[:prompt_len], then feeds the rest one at a time
    ignoring the model's own choices. The resulting cache is the
    reference bytes for any same-sequence comparison.
    """
    toks = [int(t) for t in tokens]
    if not (1 <= prompt_len <= len(toks)):
        raise ValueError(f"prompt_len {prompt_len} outside [1, {len(toks)}]")
    session = new_session(base, None, max_context or len(toks) + 1, ledger)
    prefill(session, toks[:prompt_len])
    for t in toks[prompt_len:]:
        decode_step_base(session, t)
    return session


def base_next_token_at(session: GenerationSession, pos: int) -> int:
    """Greedy base prediction at a position this session computed.

    Used when committing blocks: the chunk-end prediction is cached with
    the chunk so later full-prefix hits can emit without computing.
    """
    row = session.final_hidden.get(pos)
    if row is None:
        raise StateError(f"position {pos} was not computed by this session")
    logits = base_linear(T.Tensor(row[None, :]), session.base.lm_head, session.ledger)
    return _argmax(logits.data[0])
