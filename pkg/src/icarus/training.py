"""Adapter training on toy corpora, in two paradigms.

The icarus paradigm runs every sequence twice: a frozen pass that
produces per-layer K/V (it touches no trainable tensor, so the tape
records nothing), then an adapted pass that attends over those exact
tensors and owns the loss. Gradients can only land on adapter pairs.
The conventional paradigm is ordinary single-branch adapter tuning and
may adapt the k/v projections too; that is precisely the model whose
cache no longer matches its base.

Teacher forcing over full sequences, loss on every predictable
position. Optimizer is decoupled-weight-decay Adam with linear warmup
into a cosine floor; moments are kept in 64-bit regardless of model
dtype so the two paradigms stay comparable at matched seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractViolationError
from .model import (CONVENTIONAL_TARGETS, DECODER_TARGETS, AdapterSet,
                    BaseWeights, ModelConfig, _rope_heads, adapted_linear,
                    base_linear, init_base, layer_attention)
from .tensor import F64, GradTape, Tensor

CORPUS_RULES = ("copy_marker", "mod_add")


@dataclass(frozen=True)
class ToyCorpus:
    """Deterministic generated sequences; (rule, seed) pins every token.

    copy_marker: span draws from a small alphabet, a marker token, then
    the span again. The second half is fully predictable from the
    first, the first half is not; the gap between those regimes is what
    training has to find.

    mod_add: triples (a, b, a+b mod alphabet); every third token is
    predictable.

    Token ids: 0 unused, content 1..alphabet, marker alphabet+1.
    """

    rule: str = "copy_marker"
    vocab_size: int = 32
    samples: int = 1024
    seed: int = 0
    alphabet: int = 16
    span: int = 8

    def __post_init__(self):
        if self.rule not in CORPUS_RULES:
            raise ConfigError(f"unknown corpus rule {self.rule!r}; valid: {CORPUS_RULES}")
        if self.samples < 1 or self.span < 1 or self.alphabet < 2:
            raise ConfigError("corpus needs positive samples, span, alphabet >= 2")
        if self.vocab_size < self.alphabet + 2:
            raise ConfigError(f"vocab {self.vocab_size} cannot hold alphabet "
                              f"{self.alphabet} plus marker")

    @property
    def marker(self) -> int:
        return self.alphabet + 1

    @property
    def seq_len(self) -> int:
        return 2 * self.span + 1 if self.rule == "copy_marker" else 3 * self.span

    @cached_property
    def table(self) -> np.ndarray:
        rng = np.random.default_rng(self.seed)
        if self.rule == "copy_marker":
            content = rng.integers(1, self.alphabet + 1, (self.samples, self.span))
            mark = np.full((self.samples, 1), self.marker)
            seqs = np.concatenate([content, mark, content], axis=1)
        else:
            a = rng.integers(1, self.alphabet + 1, (self.samples, self.span))
            b = rng.integers(1, self.alphabet + 1, (self.samples, self.span))
            c = ((a - 1) + (b - 1)) % self.alphabet + 1
            seqs = np.stack([a, b, c], axis=2).reshape(self.samples, 3 * self.span)
        seqs = seqs.astype(np.int64)
        seqs.setflags(write=False)
        return seqs

    def batch(self, step: int, batch_size: int) -> np.ndarray:
        idx = (step * batch_size + np.arange(batch_size)) % self.samples
        return self.table[idx]


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "icarus"
    steps: int = 500
    batch_size: int = 8
    lr: float = 5e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_frac: float = 0.03
    rank: int = 8
    alpha: float = 16.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("icarus", "conventional"):
            raise ConfigError(f"train mode must be icarus or conventional, got {self.mode!r}")
        if self.steps < 0 or self.batch_size < 1 or self.rank < 1:
            raise ConfigError("steps must be >= 0, batch and rank positive")
        if self.lr < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ConfigError("rates must be non-negative, eps positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ConfigError("warmup fraction must lie in [0, 1]")


def lr_at(config: TrainConfig, step: int) -> float:
    warm = max(1, round(config.steps * config.warmup_frac))
    if step < warm:
        return config.lr * (step + 1) / warm
    span = max(1, config.steps - warm)
    return config.lr * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / span))


class AdamW:
    """Decoupled weight decay; bias-corrected moments held in 64-bit."""

    def __init__(self, params: list[Tensor], config: TrainConfig):
        self.params = list(params)
        self.config = config
        self.t = 0
        self.m = [np.zeros(p.shape, F64) for p in self.params]
        self.v = [np.zeros(p.shape, F64) for p in self.params]

    def step(self) -> None:
        c = self.config
        lr = lr_at(c, self.t)
        self.t += 1
        for p, m, v in zip(self.params, self.m, self.v):
            g = np.zeros(p.shape, F64) if p.grad is None else p.grad.astype(F64)
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            mh = m / (1.0 - c.beta1 ** self.t)
            vh = v / (1.0 - c.beta2 ** self.t)
            upd = lr * (mh / (np.sqrt(vh) + c.eps) + c.weight_decay * p.data.astype(F64))
            p.data = (p.data.astype(F64) - upd).astype(p.data.dtype)
            p.grad = None


# ---------------------------------------------------------------------------
# Forward passes


def stack_forward(base: BaseWeights, tokens, adapter: AdapterSet | None = None,
                  kv_source: list[tuple[Tensor, Tensor]] | None = None,
                  adapt_kv: bool = False) -> tuple[Tensor, list[tuple[Tensor, Tensor]]]:
    """Whole-sequence forward; returns (logits [L, vocab], per-layer (k, v)).

    kv_source substitutes the attended K/V wholesale, which is how the
    adapted branch rides the frozen branch's cache. adapt_kv lets the
    adapter reach wk/wv; only the conventional paradigm does that.
    """
    cfg = base.config
    toks = np.asarray(tokens, dtype=np.int64)
    positions = np.arange(toks.shape[0])
    scaling = adapter.scaling if adapter is not None else 0.0

    def pair(layer: int, t: str):
        return adapter.pair(layer, t) if adapter is not None else None

    x = T.gather_rows(base.embed, toks)
    kvs: list[tuple[Tensor, Tensor]] = []
    for layer in range(cfg.num_layers):
        lw = base.layers[layer]
        h = T.rms_norm(x, lw.attn_gain, cfg.rms_eps)
        if kv_source is not None:
            kt, vt = kv_source[layer]
        else:
            kp = pair(layer, "k") if adapt_kv else None
            vp = pair(layer, "v") if adapt_kv else None
            kt = _rope_heads(adapted_linear(h, lw.wk, kp, scaling),
                             cfg.num_kv_heads, positions, cfg)
            vt = adapted_linear(h, lw.wv, vp, scaling)
        q = _rope_heads(adapted_linear(h, lw.wq, pair(layer, "q"), scaling),
                        cfg.num_heads, positions, cfg)
        att = layer_attention(q, kt, vt, positions, cfg)
        x = T.add(x, adapted_linear(att, lw.wo, pair(layer, "o"), scaling))
        h2 = T.rms_norm(x, lw.ffn_gain, cfg.rms_eps)
        f = T.mul(T.silu(adapted_linear(h2, lw.gate, pair(layer, "gate"), scaling)),
                  adapted_linear(h2, lw.up, pair(layer, "up"), scaling))
        x = T.add(x, adapted_linear(f, lw.down, pair(layer, "down"), scaling))
        kvs.append((kt, vt))
    logits = base_linear(T.rms_norm(x, base.final_gain, cfg.rms_eps), base.lm_head)
    return logits, kvs


def sequence_loss(base: BaseWeights, adapter: AdapterSet | None, tokens,
                  mode: str) -> Tensor:
    """Teacher-forced mean next-token loss for one sequence."""
    toks = np.asarray(tokens, dtype=np.int64)
    if mode == "icarus":
        _, kvs = stack_forward(base, toks)
        frozen = [(Tensor(k.data), Tensor(v.data)) for k, v in kvs]
        logits, _ = stack_forward(base, toks, adapter=adapter, kv_source=frozen)
    elif mode == "conventional":
        logits, _ = stack_forward(base, toks, adapter=adapter, adapt_kv=True)
    else:
        raise ConfigError(f"unknown training mode {mode!r}")
    n = toks.shape[0]
    return T.cross_entropy_rows(T.slice_rows(logits, 0, n - 1), toks[1:])


def batch_loss(base: BaseWeights, adapter: AdapterSet | None, batch,
               mode: str) -> Tensor:
    losses = [sequence_loss(base, adapter, seq, mode) for seq in batch]
    total = losses[0]
    for extra in losses[1:]:
        total = T.add(total, extra)
    return T.scale(total, 1.0 / len(losses))


def icarus_train_step(base: BaseWeights, adapter: AdapterSet, batch,
                      opt: AdamW) -> float:
    with GradTape() as tape:
        loss = batch_loss(base, adapter, batch, "icarus")
        tape.backward(loss)
    opt.step()
    return float(loss.data)


def conventional_train_step(base: BaseWeights, adapter: AdapterSet, batch,
                            opt: AdamW) -> float:
    with GradTape() as tape:
        loss = batch_loss(base, adapter, batch, "conventional")
        tape.backward(loss)
    opt.step()
    return float(loss.data)


def probe_kv(base: BaseWeights, adapter: AdapterSet | None, tokens,
             adapt_kv: bool = False) -> list[tuple[np.ndarray, np.ndarray]]:
    """Raw K/V bytes a single-branch model would cache for a probe.

    Passing an adapter here models the conventional stack (the adapter
    shapes the stream that produces K/V). The icarus-trained model's
    cache is probe_kv(base, None) by construction; its adapter never
    sits on the KV-producing branch.
    """
    _, kvs = stack_forward(base, tokens, adapter=adapter, adapt_kv=adapt_kv)
    return [(k.data.copy(), v.data.copy()) for k, v in kvs]


# ---------------------------------------------------------------------------
# The loop


@dataclass
class TrainResult:
    mode: str
    trace: list[tuple[int, str, float]]
    adapters: AdapterSet
    base: BaseWeights
    loss_start: float = field(default=float("nan"))
    loss_final: float = field(default=float("nan"))

    def trace_lines(self) -> list[str]:
        return [f"{s},{m},{l:.6f}" for s, m, l in self.trace]


def train_loop(model_config: ModelConfig, config: TrainConfig,
               corpus: ToyCorpus, base: BaseWeights | None = None,
               tail: int = 25) -> TrainResult:
    """Run one paradigm to completion and audit the freeze afterwards.

    loss_final averages the last `tail` recorded losses; single-step
    losses bounce with the batch draw and the average is what the
    parity comparison reads. Divergence raises with the partial trace
    attached as `.trace`.
    """
    if model_config.vocab_size < corpus.vocab_size:
        raise ConfigError(f"model vocab {model_config.vocab_size} smaller than "
                          f"corpus vocab {corpus.vocab_size}")
    if base is None:
        base = init_base(model_config, seed=config.seed)
    freeze0 = base.freeze_hash
    targets = DECODER_TARGETS if config.mode == "icarus" else CONVENTIONAL_TARGETS
    adapter = AdapterSet.init(model_config, rank=config.rank, alpha=config.alpha,
                              targets=targets, seed=config.seed + 1, task=config.mode)
    opt = AdamW(adapter.params(), config)
    step_fn = icarus_train_step if config.mode == "icarus" else conventional_train_step

    trace: list[tuple[int, str, float]] = []
    for step in range(config.steps):
        loss = step_fn(base, adapter, corpus.batch(step, config.batch_size), opt)
        if not math.isfinite(loss):
            err = RuntimeError(f"loss diverged at step {step}")
            err.trace = trace
            raise err
        trace.append((step, config.mode, loss))

    if base.content_hash() != freeze0:
        raise ContractViolationError("base weights changed during training")
    for name, t in base.named():
        if t.grad is not None:
            raise ContractViolationError(f"gradient landed on frozen tensor {name}")

    result = TrainResult(config.mode, trace, adapter, base)
    if trace:
        result.loss_start = trace[0][2]
        last = [l for _, _, l in trace[-min(tail, len(trace)):]]
        result.loss_final = float(np.mean(last))
    return result
