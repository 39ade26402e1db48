import dataclasses

import numpy as np
import pytest

from icarus.errors import ConfigError
from icarus.model import ModelConfig, init_base
from icarus.simulate import (CostModel, RunReport, WorkloadConfig,
                             generate_workload, make_agents, namespace_probe,
                             p95_nearest_rank, run, sweep)


def toy_config(**over):
    kw = dict(num_layers=2, hidden_dim=8, num_heads=2, num_kv_heads=1,
              head_dim=4, ffn_dim=16, vocab_size=32)
    kw.update(over)
    return ModelConfig(**kw)


def small_workload(**over):
    kw = dict(num_agents=4, requests=6, qps=2.0, input_len_min=16,
              input_len_max=24, output_len_min=4, output_len_max=6,
              obs_len_min=8, obs_len_max=8, turns_min=2, turns_max=3, seed=0)
    kw.update(over)
    return WorkloadConfig(**kw)


BASE = init_base(toy_config(), seed=0)
AGENTS = make_agents(BASE.config, 4, seed=1)
COST = CostModel()


def small_trace(**over):
    return generate_workload(small_workload(**over), vocab_size=32, max_context=256)


# -- workload ----------------------------------------------------------------


def test_workload_is_deterministic_and_qps_only_moves_arrivals():
    one = small_trace()
    two = small_trace()
    assert one == two
    fast = small_trace(qps=8.0)
    assert [r.turns for r in fast.requests] == [r.turns for r in one.requests]
    assert [r.arrival_ms for r in fast.requests] != [r.arrival_ms for r in one.requests]
    assert small_trace(seed=5) != one


def test_round_robin_routing_walks_the_agents():
    trace = small_trace(requests=12)
    for req in trace.requests:
        for j, turn in enumerate(req.turns):
            assert turn.agent == j % 4


def test_skewed_routing_concentrates_on_the_hot_agent():
    config = small_workload(routing="random_skewed", skew_mass=0.5,
                            requests=4000, turns_min=3, turns_max=3)
    trace = generate_workload(config, vocab_size=32, max_context=256)
    agents = [t.agent for r in trace.requests for t in r.turns]
    freq = agents.count(0) / len(agents)
    assert abs(freq - 0.5) < 0.03
    assert set(agents) == {0, 1, 2, 3}


def test_reflexion_appends_a_no_input_review_turn():
    trace = small_trace(pattern="reflexion")
    for req in trace.requests:
        assert 3 <= len(req.turns) <= 4  # turns_min+1 .. turns_max+1
        assert req.turns[-1].new_tokens == ()
        assert req.turns[-1].output_len >= 1
        for turn in req.turns[:-1]:
            assert len(turn.new_tokens) > 0


def test_workload_validation():
    with pytest.raises(ConfigError):
        small_workload(pattern="tree_of_thought")
    with pytest.raises(ConfigError):
        small_workload(qps=0.0)
    with pytest.raises(ConfigError):
        small_workload(turns_min=3, turns_max=2)
    with pytest.raises(ConfigError):
        small_workload(skew_mass=1.5)
    with pytest.raises(ConfigError, match="shrink"):
        generate_workload(small_workload(), vocab_size=32, max_context=16)
    with pytest.raises(ConfigError, match="vocab"):
        generate_workload(small_workload(), vocab_size=2)
    with pytest.raises(ConfigError):
        CostModel(param_pass_cost=-1.0)


def test_p95_is_nearest_rank():
    assert p95_nearest_rank([]) == 0.0
    assert p95_nearest_rank([7.0]) == 7.0
    hundred = [float(i) for i in range(100, 0, -1)]
    assert p95_nearest_rank(hundred) == 95.0
    assert p95_nearest_rank([1.0, 2.0, 3.0]) == 3.0


def test_report_row_matches_header():
    trace = small_trace(requests=2)
    rep = run(trace, "icarus", BASE, AGENTS, 1 << 22, COST, max_context=256)
    row = rep.as_row().split(",")
    assert len(row) == len(RunReport.csv_header().split(","))
    assert row[0] == "icarus"
    assert float(row[3]) == 2.0


def test_agents_are_distinct_but_cache_compatible():
    assert len({a.task for a in AGENTS}) == 4
    blobs = {a.layers[0]["q"].b.data.tobytes() for a in AGENTS}
    assert len(blobs) == 4
    for a in AGENTS:
        assert set(a.targets).isdisjoint({"k", "v"})


# -- serving runs ------------------------------------------------------------


def test_token_conservation_in_both_modes():
    trace = small_trace()
    want = 0
    for req in trace.requests:
        ctx = 0
        for turn in req.turns:
            ctx += len(turn.new_tokens)
            want += ctx
            ctx += turn.output_len
    for mode in ("baseline", "icarus"):
        rep = run(trace, mode, BASE, AGENTS, 1 << 22, COST, max_context=256)
        assert rep.prefill_tokens + rep.prefix_hit_tokens == want, mode
        assert rep.completed == len(trace.requests)


def test_single_agent_modes_are_identical():
    trace = generate_workload(small_workload(num_agents=1, requests=5),
                              vocab_size=32, max_context=256)
    reps = {mode: run(trace, mode, BASE, AGENTS[:1], 1 << 22, COST,
                      max_context=256) for mode in ("baseline", "icarus")}
    a = dataclasses.asdict(reps["baseline"])
    b = dataclasses.asdict(reps["icarus"])
    a.pop("mode"), b.pop("mode")
    assert a == b


def test_runs_are_deterministic():
    trace = small_trace()
    one = run(trace, "icarus", BASE, AGENTS, 1 << 22, COST, max_context=256)
    two = run(trace, "icarus", BASE, AGENTS, 1 << 22, COST, max_context=256)
    assert one == two


def test_decode_paths_agree_on_tokens_and_differ_on_passes():
    trace = small_trace(requests=3)
    fused = run(trace, "icarus", BASE, AGENTS, 1 << 22, COST,
                path="fused", max_context=256)
    seq = run(trace, "icarus", BASE, AGENTS, 1 << 22, COST,
              path="sequential", max_context=256)
    assert seq.decode_steps == fused.decode_steps
    assert seq.param_passes == 2 * fused.param_passes
    assert seq.prefill_tokens == fused.prefill_tokens
    assert seq.kv_bytes_written == fused.kv_bytes_written
    assert seq.p95_latency_ms > fused.p95_latency_ms


def test_shared_namespace_dominates_private_ones():
    trace = small_trace()
    baseline = run(trace, "baseline", BASE, AGENTS, 1 << 22, COST, max_context=256)
    icarus = run(trace, "icarus", BASE, AGENTS, 1 << 22, COST, max_context=256)
    assert icarus.prefix_hit_tokens > baseline.prefix_hit_tokens
    assert icarus.prefill_tokens < baseline.prefill_tokens
    assert icarus.peak_kv_bytes < baseline.peak_kv_bytes
    assert icarus.p95_latency_ms < baseline.p95_latency_ms
    assert icarus.cross_model_hit_tokens > 0


def test_infeasible_budget_is_rejected_up_front():
    trace = small_trace()
    need = trace.max_context_tokens() // 16 * 16 * BASE.config.kv_bytes_per_token
    with pytest.raises(ConfigError, match="infeasible"):
        run(trace, "icarus", BASE, AGENTS, need - 1, COST, max_context=256)


def test_sweep_covers_the_grid_in_order():
    reports = sweep(small_workload(requests=2), [1.0, 4.0],
                    ["baseline", "icarus"], BASE, AGENTS, 1 << 22, COST,
                    max_context=256)
    assert [(r.qps, r.mode) for r in reports] == [
        (1.0, "baseline"), (1.0, "icarus"), (4.0, "baseline"), (4.0, "icarus")]


def test_namespace_probe_counts_exactly():
    out = namespace_probe(BASE, AGENTS, n_agents=2, prompt_len=32, seed=3)
    assert out["baseline"]["prefill_tokens"] == 2 * out["icarus"]["prefill_tokens"]
    assert out["icarus"]["prefix_hit_tokens"] == 32
    assert out["baseline"]["prefix_hit_tokens"] == 0
    assert out["peak_ratio"] == 2.0
