"""Discrete-event serving over real sessions and a shared block pool.

Requests are multi-turn conversations over one growing context; every
turn is taken by some agent (round-robin or skewed draw), prefills the
current context through the pool, decodes its reply with the real
engine, appends observation tokens, and commits. The only difference
between the two serving modes is pool namespacing: baseline gives each
agent a private namespace, icarus gives everyone one. Same agents, same
workload bytes, same costs.

Time is simulated. A single FIFO server executes turns; a turn's
service time is priced off the ledger and pool deltas it caused, so the
fused path's one-parameter-pass decode and the sequential path's two
are charged exactly as measured, never assumed. Zero think time between
turns: at high arrival rates turns from many live requests interleave,
which is what makes the resident working set, and therefore eviction
pressure, grow with load.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field, replace

import numpy as np

from . import engine
from .errors import ConfigError
from .kvpool import BLOCK_TOKENS, KvCachePool
from .metrics import Ledger
from .model import AdapterSet, BaseWeights, ModelConfig
from .tensor import F32

PATTERNS = ("react", "reflexion")
ROUTINGS = ("round_robin", "random_skewed")


@dataclass(frozen=True)
class WorkloadConfig:
    pattern: str = "react"
    num_agents: int = 8
    routing: str = "round_robin"
    skew_mass: float = 0.5
    qps: float = 1.0
    requests: int = 128
    input_len_min: int = 32
    input_len_max: int = 64
    output_len_min: int = 8
    output_len_max: int = 16
    obs_len_min: int = 8
    obs_len_max: int = 16
    turns_min: int = 2
    turns_max: int = 4
    vocab_low: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.pattern not in PATTERNS:
            raise ConfigError(f"pattern must be one of {PATTERNS}, got {self.pattern!r}")
        if self.routing not in ROUTINGS:
            raise ConfigError(f"routing must be one of {ROUTINGS}, got {self.routing!r}")
        if self.num_agents < 1 or self.requests < 1:
            raise ConfigError("need at least one agent and one request")
        if self.qps <= 0:
            raise ConfigError(f"qps must be positive, got {self.qps}")
        if not 0.0 <= self.skew_mass <= 1.0:
            raise ConfigError(f"skew mass must lie in [0, 1], got {self.skew_mass}")
        for lo, hi, what in ((self.input_len_min, self.input_len_max, "input"),
                             (self.output_len_min, self.output_len_max, "output"),
                             (self.obs_len_min, self.obs_len_max, "obs"),
                             (self.turns_min, self.turns_max, "turns")):
            if not 1 <= lo <= hi:
                raise ConfigError(f"{what} range [{lo}, {hi}] is not a valid range")


@dataclass(frozen=True)
class TurnSpec:
    agent: int
    new_tokens: tuple[int, ...]  # appended to the context before this turn runs
    output_len: int


@dataclass(frozen=True)
class RequestSpec:
    request_id: int
    arrival_ms: float
    turns: tuple[TurnSpec, ...]


@dataclass(frozen=True)
class WorkloadTrace:
    config: WorkloadConfig
    requests: tuple[RequestSpec, ...]

    def max_context_tokens(self) -> int:
        worst = 0
        for r in self.requests:
            total = sum(len(t.new_tokens) + t.output_len for t in r.turns)
            worst = max(worst, total)
        return worst


def _route(rng: np.random.Generator, config: WorkloadConfig, turn_index: int) -> int:
    n = config.num_agents
    if n == 1:
        return 0
    if config.routing == "round_robin":
        return turn_index % n
    if rng.random() < config.skew_mass:
        return 0
    return int(rng.integers(1, n))


def generate_workload(config: WorkloadConfig, vocab_size: int = 256,
                      max_context: int = 256) -> WorkloadTrace:
    """Deterministic trace; structure and arrivals use separate streams.

    The structural stream never sees qps, so sweeping qps replays the
    same conversations under different load.
    """
    structure = np.random.default_rng(np.random.SeedSequence([config.seed, 0]))
    arrivals = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    if vocab_size <= config.vocab_low + 1:
        raise ConfigError(f"vocab {vocab_size} too small for token draws")

    def draw_tokens(n: int) -> tuple[int, ...]:
        return tuple(int(t) for t in
                     structure.integers(config.vocab_low, vocab_size, n))

    requests = []
    clock = 0.0
    for rid in range(config.requests):
        clock += float(arrivals.exponential(1000.0 / config.qps))
        n_turns = int(structure.integers(config.turns_min, config.turns_max + 1))
        turns = []
        for j in range(n_turns):
            agent = _route(structure, config, j)
            if j == 0:
                new = draw_tokens(int(structure.integers(config.input_len_min,
                                                         config.input_len_max + 1)))
            else:
                new = draw_tokens(int(structure.integers(config.obs_len_min,
                                                         config.obs_len_max + 1)))
            out = int(structure.integers(config.output_len_min,
                                         config.output_len_max + 1))
            turns.append(TurnSpec(agent, new, out))
        if config.pattern == "reflexion":
            # A reflection pass re-reads everything and writes nothing new
            # to the context before it runs.
            agent = _route(structure, config, n_turns)
            out = int(structure.integers(config.output_len_min,
                                         config.output_len_max + 1))
            turns.append(TurnSpec(agent, (), out))
        requests.append(RequestSpec(rid, clock, tuple(turns)))
    trace = WorkloadTrace(config, tuple(requests))
    worst = trace.max_context_tokens()
    if worst > max_context:
        raise ConfigError(f"workload needs {worst} context tokens, model window "
                          f"is {max_context}; shrink lengths or turns")
    return trace


@dataclass(frozen=True)
class CostModel:
    """Milliseconds per unit of work; decode is priced from the ledger."""

    prefill_token_cost: float = 1.0
    param_pass_cost: float = 4.0
    kv_byte_read_cost: float = 4e-5
    recompute_token_cost: float = 1.0
    swap_byte_cost: float = 2e-4

    def __post_init__(self):
        for name, val in (("prefill_token_cost", self.prefill_token_cost),
                          ("param_pass_cost", self.param_pass_cost),
                          ("kv_byte_read_cost", self.kv_byte_read_cost),
                          ("recompute_token_cost", self.recompute_token_cost),
                          ("swap_byte_cost", self.swap_byte_cost)):
            if val < 0:
                raise ConfigError(f"{name} cannot be negative, got {val}")


@dataclass
class RunReport:
    mode: str
    eviction: str
    path: str
    qps: float
    num_agents: int
    completed: int
    latencies_ms: list[float]
    p95_latency_ms: float
    throughput_rps: float
    sim_seconds: float
    eviction_count: int
    recompute_tokens: int
    swap_bytes: int
    peak_kv_bytes: int
    cross_model_hit_tokens: int
    prefill_tokens: int
    prefix_hit_tokens: int
    decode_steps: int
    param_passes: int
    kv_bytes_read: int
    kv_bytes_written: int

    CSV_FIELDS = ("mode", "eviction", "path", "qps", "num_agents", "completed",
                  "p95_latency_ms", "throughput_rps", "sim_seconds",
                  "eviction_count", "recompute_tokens", "swap_bytes",
                  "peak_kv_bytes", "cross_model_hit_tokens", "prefill_tokens",
                  "prefix_hit_tokens", "decode_steps", "param_passes",
                  "kv_bytes_read", "kv_bytes_written")

    def as_row(self) -> str:
        vals = []
        for name in self.CSV_FIELDS:
            v = getattr(self, name)
            vals.append(f"{v:.6f}" if isinstance(v, float) else str(v))
        return ",".join(vals)

    @staticmethod
    def csv_header() -> str:
        return ",".join(RunReport.CSV_FIELDS)


def p95_nearest_rank(latencies: list[float]) -> float:
    if not latencies:
        return 0.0
    ordered = sorted(latencies)
    rank = max(1, int(np.ceil(0.95 * len(ordered))))
    return ordered[rank - 1]


def make_agents(config: ModelConfig, n: int, seed: int = 0,
                scale: float = 0.05) -> list[AdapterSet]:
    """Distinct small nonzero adapters, one per agent.

    Unlike the training init these get nonzero B so agents disagree from
    the first token; they still sit only on decoder targets, so every
    agent's cache bytes remain the base's.
    """
    agents = []
    for i in range(n):
        ad = AdapterSet.init(config, seed=seed + i, task=f"agent{i}")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 17, i]))
        for per in ad.layers:
            for pair in per.values():
                pair.b.data = (rng.standard_normal(pair.b.shape) * scale
                               ).astype(pair.b.data.dtype)
        agents.append(ad)
    return agents


def run(trace: WorkloadTrace, mode: str, base: BaseWeights,
        agents: list[AdapterSet], budget_bytes: int, cost: CostModel,
        eviction: str = "recompute", swap_budget_bytes: int = 0,
        path: str = "fused", max_context: int = 512) -> RunReport:
    """Serve the trace to completion in one mode and report.

    Single-threaded FIFO over turn units: a turn is ready when its
    request has arrived and its previous turn has finished; the server
    takes ready turns in (ready time, request id) order and runs each
    to completion. Deterministic for a fixed (trace, mode, budget,
    cost) tuple.
    """
    cfg = base.config
    if len(agents) < trace.config.num_agents:
        raise ConfigError(f"trace names {trace.config.num_agents} agents, "
                          f"got {len(agents)}")
    worst_blocks = trace.max_context_tokens() // BLOCK_TOKENS
    worst_bytes = worst_blocks * BLOCK_TOKENS * cfg.kv_bytes_per_token
    if worst_bytes > budget_bytes:
        raise ConfigError(f"budget {budget_bytes} cannot hold one request's "
                          f"{worst_bytes} committed bytes; infeasible")
    pool = KvCachePool(cfg, budget_bytes, mode, eviction=eviction,
                       swap_budget_bytes=swap_budget_bytes)
    ledger = Ledger()

    contexts: dict[int, list[int]] = {r.request_id: [] for r in trace.requests}
    next_turn = {r.request_id: 0 for r in trace.requests}
    by_id = {r.request_id: r for r in trace.requests}
    ready: list[tuple[float, int]] = []
    for r in trace.requests:
        heapq.heappush(ready, (r.arrival_ms, r.request_id))

    def turn_cost(led_before: dict, pool_before: dict) -> float:
        led, pc = ledger.snapshot(), pool.stats()
        ms = cost.prefill_token_cost * (led["prefill_tokens"] - led_before["prefill_tokens"])
        ms += cost.param_pass_cost * (led["param_passes"] - led_before["param_passes"])
        ms += cost.kv_byte_read_cost * (led["kv_bytes_read"] - led_before["kv_bytes_read"])
        ms += cost.recompute_token_cost * (pc["recompute_tokens"] - pool_before["recompute_tokens"])
        swap_moved = (pc["swap_out_bytes"] - pool_before["swap_out_bytes"]
                      + pc["swap_in_bytes"] - pool_before["swap_in_bytes"])
        ms += cost.swap_byte_cost * swap_moved
        return ms

    server_free = 0.0
    finish: dict[int, float] = {}
    latencies: list[float] = []
    step_fns = {"fused": engine.decode_step_fused,
                "sequential": engine.decode_step_sequential}
    if path not in step_fns:
        raise ConfigError(f"decode path must be fused or sequential, got {path!r}")
    step = step_fns[path]

    while ready:
        ready_at, rid = heapq.heappop(ready)
        req = by_id[rid]
        spec = req.turns[next_turn[rid]]
        start = max(ready_at, server_free)

        agent_name = f"agent{spec.agent}"
        namespace = None if mode == "icarus" else agent_name
        context = contexts[rid]
        context.extend(spec.new_tokens)

        led0, pool0 = ledger.snapshot(), pool.stats()
        session = engine.new_session(base, agents[spec.agent],
                                     max_context=max_context, ledger=ledger)
        first = engine.prefill(session, context, pool=pool,
                               namespace=namespace, reader=agent_name)
        chain = session.borrowed_chain
        out: list[int] = []
        if spec.output_len > 0:
            out.append(first)
            while len(out) < spec.output_len:
                out.append(step(session, out[-1]))
        full = context + out
        # The final reply token was emitted but never fed back, so its
        # KV does not exist yet; index only covered positions.
        covered = full[:-1] if out else full
        pool.commit(namespace, covered, session.cache,
                    next_token_fn=lambda p: engine.base_next_token_at(session, p),
                    creator=agent_name)
        pool.release(chain)
        contexts[rid] = full

        end = start + turn_cost(led0, pool0)
        server_free = end
        next_turn[rid] += 1
        if next_turn[rid] < len(req.turns):
            heapq.heappush(ready, (end, rid))
        else:
            finish[rid] = end
            latencies.append(end - req.arrival_ms)

    led = ledger.snapshot()
    pc = pool.stats()
    last_finish_ms = max(finish.values()) if finish else 0.0
    sim_seconds = last_finish_ms / 1000.0
    throughput = len(finish) / sim_seconds if sim_seconds > 0 else 0.0
    return RunReport(
        mode=mode, eviction=eviction, path=path, qps=trace.config.qps,
        num_agents=trace.config.num_agents, completed=len(finish),
        latencies_ms=latencies, p95_latency_ms=p95_nearest_rank(latencies),
        throughput_rps=throughput, sim_seconds=sim_seconds,
        eviction_count=pc["evicted_blocks"], recompute_tokens=pc["recompute_tokens"],
        swap_bytes=pc["swap_out_bytes"] + pc["swap_in_bytes"],
        peak_kv_bytes=pc["peak_bytes"],
        cross_model_hit_tokens=pc["cross_model_hit_tokens"],
        prefill_tokens=led["prefill_tokens"],
        prefix_hit_tokens=led["prefix_hit_tokens"],
        decode_steps=led["decode_steps"], param_passes=led["param_passes"],
        kv_bytes_read=led["kv_bytes_read"], kv_bytes_written=led["kv_bytes_written"])


def sweep(workload: WorkloadConfig, qps_list, modes, base: BaseWeights,
          agents: list[AdapterSet], budget_bytes: int, cost: CostModel,
          eviction: str = "recompute", swap_budget_bytes: int = 0,
          path: str = "fused", vocab_size: int | None = None,
          max_context: int = 512) -> list[RunReport]:
    """Cartesian qps x mode sweep over the same structural workload."""
    vs = vocab_size if vocab_size is not None else base.config.vocab_size
    reports = []
    for qps in qps_list:
        trace = generate_workload(replace(workload, qps=float(qps)), vocab_size=vs,
                                  max_context=max_context)
        for mode in modes:
            reports.append(run(trace, mode, base, agents, budget_bytes, cost,
                               eviction=eviction, swap_budget_bytes=swap_budget_bytes,
                               path=path, max_context=max_context))
    return reports


def namespace_probe(base: BaseWeights, agents: list[AdapterSet], n_agents: int,
                    prompt_len: int = 256, seed: int = 11) -> dict:
    """N models, one identical prompt each, both modes; exact counters.

    Every agent takes one zero-output turn over the same prompt, so the
    context never grows and the two modes differ only in how many times
    those bytes are stored and computed.
    """
    cfg = base.config
    rng = np.random.default_rng(seed)
    prompt = tuple(int(t) for t in rng.integers(1, cfg.vocab_size, prompt_len))
    turns = tuple(TurnSpec(agent=i, new_tokens=prompt if i == 0 else (),
                           output_len=0) for i in range(n_agents))
    # One request, N turns; generous budget so nothing evicts.
    config = WorkloadConfig(num_agents=n_agents, requests=1, qps=1.0, seed=seed)
    trace = WorkloadTrace(config, (RequestSpec(0, 0.0, turns),))
    budget = 4 * n_agents * prompt_len * cfg.kv_bytes_per_token
    cost = CostModel()
    out = {}
    for mode in ("baseline", "icarus"):
        rep = run(trace, mode, base, agents[:n_agents], budget, cost,
                  max_context=prompt_len)
        out[mode] = {"peak_kv_bytes": rep.peak_kv_bytes,
                     "prefill_tokens": rep.prefill_tokens,
                     "prefix_hit_tokens": rep.prefix_hit_tokens}
    out["peak_ratio"] = out["baseline"]["peak_kv_bytes"] / out["icarus"]["peak_kv_bytes"]
    return out
