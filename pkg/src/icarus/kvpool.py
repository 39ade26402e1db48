"""Shared prefix-indexed KV block store with budgeted eviction.

Blocks hold exactly BLOCK_TOKENS positions of per-layer K/V plus the
chunk's tokens. The index keys a block by (namespace, chain hash) where
the chain hash folds the parent's hash with the chunk tokens, so equal
prefixes collapse onto one chain per namespace. A hit still re-verifies
the raw tokens; hash equality alone is never trusted.

Namespacing is the whole mode switch: icarus mode resolves every
namespace to one shared key, baseline mode keeps each caller's
namespace private. Nothing else differs between the modes.

Eviction considers only ref-count-zero resident blocks, oldest touch
first, deeper blocks before their ancestors on ties. Freeing a block
drops its now-unreachable descendants too; sessions pin whole prefix
chains, so any evictable block has only evictable descendants. The
"recompute" policy forgets bytes and remembers the chain hash so a
later miss can be billed as recomputation; the "swap" policy moves the
charge to a second budget and restores on next touch. Placement is
simulated (payload bytes stay resident); every byte is accounted as if
it moved.

Single-threaded by design; lookup and commit are atomic with respect to
eviction because nothing interleaves them.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .errors import CapacityError, ConfigError, ContractViolationError, ModeError
from .model import KvCacheTensor, ModelConfig

BLOCK_TOKENS = 16
_ROOT_HASH = 0
_SHARED_NS = "__shared__"


def chain_hash(parent: int, chunk: tuple[int, ...]) -> int:
    """Stable 64-bit hash of (parent hash, chunk tokens)."""
    h = hashlib.sha256()
    h.update(int(parent).to_bytes(8, "little"))
    h.update(np.asarray(chunk, dtype=np.int64).tobytes())
    return int.from_bytes(h.digest()[:8], "little")


class KvBlock:
    """One immutable cached chunk. Payload arrays are write-protected."""

    __slots__ = ("block_id", "namespace", "hash", "parent", "depth", "tokens",
                 "k", "v", "next_token", "creator", "ref_count", "last_touch",
                 "residency", "nbytes")

    def __init__(self, block_id: int, namespace: str, chash: int, parent: int,
                 depth: int, tokens: tuple[int, ...], k: list[np.ndarray],
                 v: list[np.ndarray], next_token: int | None, creator: str | None):
        for arr in (*k, *v):
            arr.setflags(write=False)
        self.block_id = block_id
        self.namespace = namespace
        self.hash = chash
        self.parent = parent
        self.depth = depth
        self.tokens = tokens
        self.k = k
        self.v = v
        self.next_token = next_token
        self.creator = creator
        self.ref_count = 0
        self.last_touch = 0
        self.residency = "gpu"
        self.nbytes = sum(a.nbytes for a in k) + sum(a.nbytes for a in v)


class MemoryBudget:
    """Byte accounting for the resident store and the swap store."""

    def __init__(self, limit_bytes: int, swap_limit_bytes: int = 0):
        if limit_bytes < 1:
            raise ConfigError(f"budget must be positive, got {limit_bytes}")
        if swap_limit_bytes < 0:
            raise ConfigError(f"swap budget cannot be negative, got {swap_limit_bytes}")
        self.limit_bytes = limit_bytes
        self.swap_limit_bytes = swap_limit_bytes
        self.in_use = 0
        self.swap_in_use = 0
        self.peak = 0

    def fits(self, nbytes: int) -> bool:
        return self.in_use + nbytes <= self.limit_bytes

    def charge(self, nbytes: int) -> None:
        if not self.fits(nbytes):
            raise CapacityError(f"charge of {nbytes} exceeds budget "
                                f"{self.in_use}/{self.limit_bytes}")
        self.in_use += nbytes
        self.peak = max(self.peak, self.in_use)

    def release(self, nbytes: int) -> None:
        if nbytes > self.in_use:
            raise ContractViolationError(f"releasing {nbytes} with only {self.in_use} charged")
        self.in_use -= nbytes

    def swap_fits(self, nbytes: int) -> bool:
        return self.swap_in_use + nbytes <= self.swap_limit_bytes

    def swap_charge(self, nbytes: int) -> None:
        if not self.swap_fits(nbytes):
            raise CapacityError(f"swap charge of {nbytes} exceeds "
                                f"{self.swap_in_use}/{self.swap_limit_bytes}")
        self.swap_in_use += nbytes

    def swap_release(self, nbytes: int) -> None:
        if nbytes > self.swap_in_use:
            raise ContractViolationError(f"swap-releasing {nbytes} with only "
                                         f"{self.swap_in_use} charged")
        self.swap_in_use -= nbytes


class KvCachePool:
    """The cross-session block store; one per serving run."""

    def __init__(self, config: ModelConfig, budget_bytes: int, mode: str,
                 eviction: str = "recompute", swap_budget_bytes: int = 0):
        if mode not in ("baseline", "icarus"):
            raise ModeError(f"pool mode must be baseline or icarus, got {mode!r}")
        if eviction not in ("recompute", "swap"):
            raise ModeError(f"eviction policy must be recompute or swap, got {eviction!r}")
        self.config = config
        self.mode = mode
        self.eviction = eviction
        self.budget = MemoryBudget(budget_bytes, swap_budget_bytes)
        self._index: dict[tuple[str, int], KvBlock] = {}
        self._children: dict[tuple[str, int], set[int]] = {}
        self._evicted: dict[str, set[int]] = {}
        self._tick = 0
        self._next_id = 0
        self.counters = {
            "lookups": 0, "hit_tokens": 0, "miss_tokens": 0,
            "cross_model_hit_tokens": 0, "committed_blocks": 0,
            "dedup_blocks": 0, "dedup_bytes_avoided": 0, "bytes_written": 0,
            "evicted_blocks": 0, "evicted_bytes": 0,
            "swap_out_blocks": 0, "swap_out_bytes": 0,
            "swap_in_blocks": 0, "swap_in_bytes": 0,
            "recompute_tokens": 0,
        }

    @property
    def block_nbytes(self) -> int:
        return BLOCK_TOKENS * self.config.kv_bytes_per_token

    def _ns(self, namespace: str | None) -> str:
        if self.mode == "icarus":
            return _SHARED_NS
        if namespace is None:
            raise ConfigError("baseline mode requires an explicit namespace")
        return namespace

    # -- read path ---------------------------------------------------------

    def lookup(self, namespace: str | None, tokens, reader: str | None = None
               ) -> tuple[int, list[KvBlock]]:
        """Longest verified block-prefix; pins every returned block.

        The caller owns the pins and must release() the chain. Swapped
        blocks on the path are restored (swap-in accounted once); if the
        resident budget cannot take a restore even after eviction, the
        chain simply ends there and the rest reads as a miss.
        """
        ns = self._ns(namespace)
        toks = [int(t) for t in tokens]
        self._tick += 1
        self.counters["lookups"] += 1
        full = len(toks) // BLOCK_TOKENS
        chain: list[KvBlock] = []
        parent = _ROOT_HASH
        for i in range(full):
            chunk = tuple(toks[i * BLOCK_TOKENS:(i + 1) * BLOCK_TOKENS])
            chash = chain_hash(parent, chunk)
            blk = self._index.get((ns, chash))
            if blk is None or blk.tokens != chunk:
                break
            blk.ref_count += 1
            if blk.residency == "swapped" and not self._swap_in(blk):
                blk.ref_count -= 1
                break
            blk.last_touch = self._tick
            chain.append(blk)
            parent = chash
        matched = len(chain) * BLOCK_TOKENS
        self.counters["hit_tokens"] += matched
        self.counters["miss_tokens"] += len(toks) - matched
        if reader is not None:
            for blk in chain:
                if blk.creator is not None and blk.creator != reader:
                    self.counters["cross_model_hit_tokens"] += BLOCK_TOKENS
        # Bill chunks that were cached once and evicted since: they are
        # about to be recomputed by the caller's prefill.
        gone = self._evicted.get(ns)
        if gone:
            miss_parent = parent
            for i in range(len(chain), full):
                chunk = tuple(toks[i * BLOCK_TOKENS:(i + 1) * BLOCK_TOKENS])
                chash = chain_hash(miss_parent, chunk)
                if chash in gone:
                    self.counters["recompute_tokens"] += BLOCK_TOKENS
                miss_parent = chash
        return matched, chain

    def release(self, chain: list[KvBlock]) -> None:
        for blk in chain:
            if blk.ref_count < 1:
                raise ContractViolationError(f"double release of block {blk.block_id}")
            blk.ref_count -= 1

    # -- write path --------------------------------------------------------

    def commit(self, namespace: str | None, tokens, cache: KvCacheTensor,
               next_token_fn=None, creator: str | None = None) -> list[KvBlock]:
        """Index every full block of tokens, reusing identical chunks.

        cache position p must hold the KV for tokens[p]. next_token_fn,
        when given, maps a chunk-end position to the base model's greedy
        next token; it is consulted only for newly stored blocks.

        Raises CapacityError when a new block cannot fit even after
        evicting every unpinned block.
        """
        ns = self._ns(namespace)
        toks = [int(t) for t in tokens]
        self._tick += 1
        full = len(toks) // BLOCK_TOKENS
        if full * BLOCK_TOKENS > cache.position_count:
            raise ConfigError(f"cache holds {cache.position_count} positions, "
                              f"cannot commit {full} full blocks")
        chain: list[KvBlock] = []
        parent = _ROOT_HASH
        for i in range(full):
            chunk = tuple(toks[i * BLOCK_TOKENS:(i + 1) * BLOCK_TOKENS])
            chash = chain_hash(parent, chunk)
            blk = self._index.get((ns, chash))
            if blk is not None and blk.tokens == chunk:
                self.counters["dedup_blocks"] += 1
                self.counters["dedup_bytes_avoided"] += blk.nbytes
                blk.last_touch = self._tick
                chain.append(blk)
                parent = chash
                continue
            nbytes = self.block_nbytes
            if not self._make_room(nbytes):
                raise CapacityError(
                    f"block of {nbytes} bytes cannot fit budget "
                    f"{self.budget.in_use}/{self.budget.limit_bytes} even after eviction")
            start = i * BLOCK_TOKENS
            k_parts, v_parts = [], []
            for layer in range(self.config.num_layers):
                k, v = cache.rows(layer, start, start + BLOCK_TOKENS)
                k_parts.append(k)
                v_parts.append(v)
            next_token = None
            if next_token_fn is not None:
                next_token = int(next_token_fn(start + BLOCK_TOKENS - 1))
            blk = KvBlock(self._next_id, ns, chash, parent, i, chunk,
                          k_parts, v_parts, next_token, creator)
            self._next_id += 1
            blk.last_touch = self._tick
            self.budget.charge(blk.nbytes)
            self._index[(ns, chash)] = blk
            self._children.setdefault((ns, parent), set()).add(chash)
            self._evicted.setdefault(ns, set()).discard(chash)
            self.counters["committed_blocks"] += 1
            self.counters["bytes_written"] += blk.nbytes
            chain.append(blk)
            parent = chash
        return chain

    # -- eviction ----------------------------------------------------------

    def _make_room(self, nbytes: int) -> bool:
        if self.budget.fits(nbytes):
            return True
        self.evict(nbytes - (self.budget.limit_bytes - self.budget.in_use))
        return self.budget.fits(nbytes)

    def evict(self, needed_bytes: int) -> int:
        """Free at least needed_bytes of resident blocks if possible.

        Returns the bytes actually freed, which may fall short when too
        much of the pool is pinned.
        """
        candidates = sorted(
            (b for b in self._index.values()
             if b.ref_count == 0 and b.residency == "gpu"),
            key=lambda b: (b.last_touch, -b.depth, b.block_id))
        freed = 0
        for blk in candidates:
            if freed >= needed_bytes:
                break
            if blk.ref_count != 0 or blk.residency != "gpu":
                continue  # a cascade below may have handled it already
            if self.eviction == "swap" and self.budget.swap_fits(blk.nbytes):
                self.budget.release(blk.nbytes)
                self.budget.swap_charge(blk.nbytes)
                blk.residency = "swapped"
                self.counters["swap_out_blocks"] += 1
                self.counters["swap_out_bytes"] += blk.nbytes
                self.counters["evicted_blocks"] += 1
                self.counters["evicted_bytes"] += blk.nbytes
                freed += blk.nbytes
            else:
                freed += self._free_subtree(blk)
        return freed

    def _free_subtree(self, blk: KvBlock) -> int:
        """Drop a block and every (necessarily unpinned) descendant."""
        freed = 0
        stack = [blk]
        while stack:
            b = stack.pop()
            if (b.namespace, b.hash) not in self._index:
                continue
            if b.ref_count != 0:
                raise ContractViolationError(
                    f"cascade reached pinned block {b.block_id}; chains must be "
                    "pinned root-first")
            for child_hash in sorted(self._children.get((b.namespace, b.hash), ())):
                child = self._index.get((b.namespace, child_hash))
                if child is not None:
                    stack.append(child)
            del self._index[(b.namespace, b.hash)]
            self._children.pop((b.namespace, b.hash), None)
            self._children.get((b.namespace, b.parent), set()).discard(b.hash)
            if b.residency == "gpu":
                self.budget.release(b.nbytes)
                freed += b.nbytes
                # A swapped descendant was already counted at swap-out time.
                self.counters["evicted_blocks"] += 1
                self.counters["evicted_bytes"] += b.nbytes
            else:
                self.budget.swap_release(b.nbytes)
            b.residency = "freed"
            self._evicted.setdefault(b.namespace, set()).add(b.hash)
        return freed

    def _swap_in(self, blk: KvBlock) -> bool:
        if not self._make_room(blk.nbytes):
            return False
        self.budget.swap_release(blk.nbytes)
        self.budget.charge(blk.nbytes)
        blk.residency = "gpu"
        self.counters["swap_in_blocks"] += 1
        self.counters["swap_in_bytes"] += blk.nbytes
        return True

    # -- reporting ---------------------------------------------------------

    def stats(self) -> dict:
        resident = sum(1 for b in self._index.values() if b.residency == "gpu")
        swapped = sum(1 for b in self._index.values() if b.residency == "swapped")
        out = {
            "mode": self.mode,
            "eviction_policy": self.eviction,
            "block_tokens": BLOCK_TOKENS,
            "limit_bytes": self.budget.limit_bytes,
            "swap_limit_bytes": self.budget.swap_limit_bytes,
            "in_use_bytes": self.budget.in_use,
            "swap_in_use_bytes": self.budget.swap_in_use,
            "peak_bytes": self.budget.peak,
            "resident_blocks": resident,
            "swapped_blocks": swapped,
        }
        out.update(self.counters)
        return out


def format_stats(stats: dict) -> str:
    """One structured text record per snapshot."""
    return json.dumps(stats, sort_keys=True)
