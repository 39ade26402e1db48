"""Instrumentation counters for engine runs.

The ledger is deliberately dumb: plain integer counters bumped at the
call sites that do the work. Parameter traffic is tracked at two
granularities. ``param_matrix_reads`` counts one event per weight-matrix
application (a fused pair call still reads the matrix once). ``param_passes``
counts whole-model parameter sweeps per decode step: one for the fused
path, two for the sequential one. ``kv_read_events`` counts unique-cache
consumption once per decode step regardless of path, and ``kv_bytes_read``
carries the matching byte volume.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field


@dataclass
class Ledger:
    prefill_tokens: int = 0
    prefix_hit_tokens: int = 0
    decode_steps: int = 0
    param_passes: int = 0
    param_matrix_reads: int = 0
    kv_read_events: int = 0
    kv_bytes_read: int = 0
    kv_bytes_written: int = 0
    notes: list[str] = field(default_factory=list)

    def snapshot(self) -> dict:
        out = asdict(self)
        out["notes"] = list(self.notes)
        return out

    def merge(self, other: "Ledger") -> None:
        self.prefill_tokens += other.prefill_tokens
        self.prefix_hit_tokens += other.prefix_hit_tokens
        self.decode_steps += other.decode_steps
        self.param_passes += other.param_passes
        self.param_matrix_reads += other.param_matrix_reads
        self.kv_read_events += other.kv_read_events
        self.kv_bytes_read += other.kv_bytes_read
        self.kv_bytes_written += other.kv_bytes_written
        self.notes.extend(other.notes)
