import numpy as np
import pytest

from icarus.errors import (CapacityError, ConfigError, ContractViolationError,
                           ModeError)
from icarus.kvpool import (BLOCK_TOKENS, KvCachePool, MemoryBudget, chain_hash,
                           format_stats)
from icarus.model import KvCacheTensor, ModelConfig


def toy_config():
    return ModelConfig(num_layers=2, hidden_dim=8, num_heads=2, num_kv_heads=1,
                       head_dim=4, ffn_dim=16, vocab_size=32)


CFG = toy_config()
BLOCK_BYTES = BLOCK_TOKENS * CFG.kv_bytes_per_token


def filled_cache(n, seed=0):
    cache = KvCacheTensor(CFG, n)
    rng = np.random.default_rng(seed)
    shape = (n, CFG.num_kv_heads, CFG.head_dim)
    for layer in range(CFG.num_layers):
        cache.append_block(layer, rng.standard_normal(shape).astype(CFG.dtype),
                           rng.standard_normal(shape).astype(CFG.dtype),
                           source_branch=0)
    return cache


def tokens_for(seed, n):
    return list(np.random.default_rng(seed).integers(0, 32, size=n))


def make_pool(budget_blocks=64, mode="baseline", **kw):
    return KvCachePool(CFG, budget_blocks * BLOCK_BYTES, mode, **kw)


def test_chain_hash_depends_on_parent_and_tokens():
    chunk = tuple(range(BLOCK_TOKENS))
    assert chain_hash(0, chunk) == chain_hash(0, chunk)
    assert chain_hash(0, chunk) != chain_hash(1, chunk)
    assert chain_hash(0, chunk) != chain_hash(0, chunk[:-1] + (9,))


def test_pool_mode_validation():
    with pytest.raises(ModeError):
        KvCachePool(CFG, 1 << 20, "fused")
    with pytest.raises(ModeError):
        KvCachePool(CFG, 1 << 20, "icarus", eviction="drop")
    with pytest.raises(ConfigError):
        make_pool().lookup(None, tokens_for(0, 16))


def test_commit_then_lookup_round_trip():
    pool = make_pool()
    toks = tokens_for(1, 40)
    cache = filled_cache(40)
    committed = pool.commit("a", toks, cache)
    assert len(committed) == 2
    assert pool.counters["committed_blocks"] == 2
    assert pool.counters["bytes_written"] == 2 * BLOCK_BYTES

    matched, chain = pool.lookup("a", toks)
    assert matched == 32
    assert [b.block_id for b in chain] == [b.block_id for b in committed]
    for i, blk in enumerate(chain):
        start = i * BLOCK_TOKENS
        want_k, want_v = cache.rows(0, start, start + BLOCK_TOKENS)
        assert np.array_equal(blk.k[0], want_k)
        assert np.array_equal(blk.v[0], want_v)
    assert pool.counters["hit_tokens"] == 32
    assert pool.counters["miss_tokens"] == 8
    pool.release(chain)


def test_lookup_stops_at_first_divergence():
    pool = make_pool()
    toks = tokens_for(2, 32)
    pool.commit("a", toks, filled_cache(32))
    other = list(toks)
    other[20] = (other[20] + 1) % 32
    matched, chain = pool.lookup("a", other)
    assert matched == 16
    pool.release(chain)
    matched, chain = pool.lookup("a", [(toks[0] + 1) % 32] + toks[1:])
    assert matched == 0 and chain == []


def test_commit_is_idempotent_per_chunk():
    pool = make_pool()
    toks = tokens_for(3, 32)
    pool.commit("a", toks, filled_cache(32, seed=1))
    pool.commit("a", toks, filled_cache(32, seed=2))
    assert pool.counters["committed_blocks"] == 2
    assert pool.counters["dedup_blocks"] == 2
    assert pool.counters["dedup_bytes_avoided"] == 2 * BLOCK_BYTES
    assert pool.counters["bytes_written"] == 2 * BLOCK_BYTES


def test_baseline_namespaces_do_not_share():
    pool = make_pool(mode="baseline")
    toks = tokens_for(4, 32)
    pool.commit("agent0", toks, filled_cache(32))
    matched, chain = pool.lookup("agent1", toks)
    assert matched == 0 and chain == []


def test_icarus_mode_shares_one_namespace():
    pool = make_pool(mode="icarus")
    toks = tokens_for(5, 32)
    pool.commit(None, toks, filled_cache(32), creator="agent0")
    matched, chain = pool.lookup("anything", toks, reader="agent1")
    assert matched == 32
    assert pool.counters["cross_model_hit_tokens"] == 32
    pool.release(chain)
    matched, chain = pool.lookup(None, toks, reader="agent0")
    assert pool.counters["cross_model_hit_tokens"] == 32
    pool.release(chain)


def test_token_verification_rejects_hash_reuse():
    pool = make_pool()
    toks = tokens_for(6, 16)
    blk = pool.commit("a", toks, filled_cache(16))[0]
    blk.tokens = tuple((t + 1) % 32 for t in blk.tokens)
    matched, chain = pool.lookup("a", toks)
    assert matched == 0 and chain == []


def test_pinned_blocks_survive_eviction():
    pool = make_pool(budget_blocks=2)
    toks = tokens_for(7, 32)
    pool.commit("a", toks, filled_cache(32))
    _, chain = pool.lookup("a", toks)
    with pytest.raises(CapacityError):
        pool.commit("a", tokens_for(8, 16), filled_cache(16))
    pool.release(chain)
    pool.commit("a", tokens_for(8, 16), filled_cache(16))
    assert pool.counters["evicted_blocks"] > 0


def test_double_release_is_a_contract_violation():
    pool = make_pool()
    pool.commit("a", tokens_for(9, 16), filled_cache(16))
    _, chain = pool.lookup("a", tokens_for(9, 16))
    pool.release(chain)
    with pytest.raises(ContractViolationError):
        pool.release(chain)


def test_eviction_prefers_cold_chains():
    pool = make_pool(budget_blocks=2)
    cold, warm = tokens_for(10, 16), tokens_for(11, 16)
    pool.commit("a", cold, filled_cache(16, seed=3))
    pool.commit("a", warm, filled_cache(16, seed=4))
    _, chain = pool.lookup("a", warm)
    pool.release(chain)

    pool.commit("a", tokens_for(12, 16), filled_cache(16, seed=5))
    assert pool.lookup("a", warm)[0] == 16
    assert pool.lookup("a", cold)[0] == 0
    assert pool.counters["evicted_blocks"] == 1


def test_evicted_chunks_bill_recompute_on_next_request():
    pool = make_pool(budget_blocks=4)
    toks = tokens_for(13, 32)
    pool.commit("a", toks, filled_cache(32))
    freed = pool.evict(2 * BLOCK_BYTES)
    assert freed == 2 * BLOCK_BYTES
    matched, chain = pool.lookup("a", toks)
    assert matched == 0 and chain == []
    assert pool.counters["recompute_tokens"] == 32
    # Recommitting clears the evicted marker; no double billing later.
    pool.commit("a", toks, filled_cache(32))
    pool.release(pool.lookup("a", toks)[1])
    assert pool.counters["recompute_tokens"] == 32


def test_swap_policy_moves_bytes_and_restores_on_touch():
    pool = make_pool(budget_blocks=2, mode="baseline", eviction="swap",
                     swap_budget_bytes=8 * BLOCK_BYTES)
    toks = tokens_for(14, 32)
    committed = pool.commit("a", toks, filled_cache(32))
    payload = committed[0].k[0].copy()
    freed = pool.evict(BLOCK_BYTES)
    assert freed == BLOCK_BYTES
    assert pool.counters["swap_out_blocks"] == 1
    assert pool.counters["evicted_blocks"] == 1
    assert pool.budget.swap_in_use == BLOCK_BYTES
    swapped = [b for b in committed if b.residency == "swapped"]
    assert len(swapped) == 1

    matched, chain = pool.lookup("a", toks)
    assert matched == 32
    assert pool.counters["swap_in_blocks"] == 1
    assert pool.budget.swap_in_use == 0
    assert all(b.residency == "gpu" for b in chain)
    assert np.array_equal(chain[0].k[0], payload)
    pool.release(chain)


def test_swap_policy_without_swap_room_frees_instead():
    pool = make_pool(budget_blocks=2, eviction="swap", swap_budget_bytes=0)
    toks = tokens_for(15, 32)
    pool.commit("a", toks, filled_cache(32))
    pool.evict(BLOCK_BYTES)
    assert pool.counters["swap_out_blocks"] == 0
    assert pool.counters["evicted_blocks"] == 1
    assert pool.lookup("a", toks)[0] < 32


def test_cascade_frees_descendants_and_guards_pins():
    pool = make_pool()
    toks = tokens_for(16, 48)
    committed = pool.commit("a", toks, filled_cache(48))
    pool._free_subtree(committed[0])
    assert pool.counters["evicted_blocks"] == 3
    assert pool.budget.in_use == 0
    assert pool.lookup("a", toks)[0] == 0

    fresh = pool.commit("a", toks, filled_cache(48))
    _, chain = pool.lookup("a", toks)
    pool.release(chain[:1])
    with pytest.raises(ContractViolationError, match="pinned"):
        pool._free_subtree(fresh[0])
    pool.release(chain[1:])


def test_block_payload_is_write_protected():
    pool = make_pool()
    blk = pool.commit("a", tokens_for(17, 16), filled_cache(16))[0]
    with pytest.raises(ValueError):
        blk.k[0][0, 0] = 0.0


def test_commit_requires_cache_coverage():
    pool = make_pool()
    with pytest.raises(ConfigError, match="cannot commit"):
        pool.commit("a", tokens_for(18, 32), filled_cache(16))


def test_partial_tail_is_never_indexed():
    pool = make_pool()
    toks = tokens_for(19, 15)
    assert pool.commit("a", toks, filled_cache(15)) == []
    assert pool.counters["committed_blocks"] == 0
    assert pool.lookup("a", toks) == (0, [])


def test_stats_snapshot_is_json_and_complete():
    import json

    pool = make_pool(budget_blocks=8)
    pool.commit("a", tokens_for(20, 32), filled_cache(32))
    snap = pool.stats()
    parsed = json.loads(format_stats(snap))
    assert parsed == json.loads(json.dumps(snap))
    assert snap["resident_blocks"] == 2
    assert snap["in_use_bytes"] == 2 * BLOCK_BYTES
    assert snap["peak_bytes"] == 2 * BLOCK_BYTES
    assert snap["mode"] == "baseline"


def test_memory_budget_guards():
    budget = MemoryBudget(100, swap_limit_bytes=50)
    budget.charge(80)
    assert not budget.fits(30)
    with pytest.raises(CapacityError):
        budget.charge(30)
    budget.release(50)
    budget.charge(30)
    assert budget.peak == 80
    with pytest.raises(ContractViolationError):
        budget.release(1000)
    budget.swap_charge(50)
    with pytest.raises(CapacityError):
        budget.swap_charge(1)
    with pytest.raises(ConfigError):
        MemoryBudget(0)
