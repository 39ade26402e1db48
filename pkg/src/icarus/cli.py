"""Operator entry point: verify suites, toy training, serving sweeps.

Every subcommand is a pure function of (config file, flags, seed) and
writes byte-identical outputs on rerun; the manifest lists each output
file with its content hash so reproducibility is a diff away. No
timestamps anywhere.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import checkpoint, engine, simulate, training
from .errors import IcarusError
from .metrics import Ledger
from .model import DECODER_TARGETS, AdapterSet, ModelConfig, init_base
from .simulate import CostModel, WorkloadConfig
from .tensor import GradTape, Tensor, finite_difference_grad
from .training import ToyCorpus, TrainConfig


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise ValueError("config file must hold a JSON object")
    return cfg


def _model_config(file_cfg: dict) -> ModelConfig:
    return ModelConfig(**file_cfg.get("model", {}))


def _effective_seed(args, file_cfg: dict) -> int:
    if args.seed is not None:
        return args.seed
    return int(file_cfg.get("seed", 0))


def _seeded_section(args, file_cfg: dict, section: str, seed: int) -> dict:
    # File values stand unless the flag was given explicitly; then the
    # flag wins, including over a per-section seed.
    out = {"seed": seed, **file_cfg.get(section, {})}
    if args.seed is not None:
        out["seed"] = seed
    return out


def _write(out_dir: Path, name: str, text: str, outputs: dict) -> None:
    path = out_dir / name
    path.write_text(text)
    outputs[name] = hashlib.sha256(text.encode()).hexdigest()


def _write_bytes(out_dir: Path, name: str, blob: bytes, outputs: dict) -> None:
    (out_dir / name).write_bytes(blob)
    outputs[name] = hashlib.sha256(blob).hexdigest()


def _manifest(out_dir: Path, subcommand: str, seed: int, resolved: dict,
              outputs: dict) -> None:
    doc = {"subcommand": subcommand, "seed": seed, "config": resolved,
           "outputs": dict(sorted(outputs.items()))}
    (out_dir / "manifest.json").write_text(json.dumps(doc, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# verify


def _suite_encoder_purity(cfg: ModelConfig, seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    for trial in range(5):
        base = init_base(cfg, seed=int(rng.integers(1 << 30)))
        adapter = AdapterSet.init(cfg, seed=int(rng.integers(1 << 30)))
        for per in adapter.layers:
            for pair in per.values():
                pair.b.data = (rng.standard_normal(pair.b.shape) * 0.1
                               ).astype(pair.b.data.dtype)
        n = int(rng.integers(4, 33))
        prompt = [int(t) for t in rng.integers(0, cfg.vocab_size, n)]
        session = engine.new_session(base, adapter)
        tok = engine.prefill(session, prompt)
        toks = [tok]
        for _ in range(6):
            toks.append(engine.decode_step_fused(session, toks[-1]))
        ref = engine.replay_base(base, prompt + toks[:-1], prompt_len=n)
        if ref.cache.fingerprint() != session.cache.fingerprint():
            return False, f"cache bytes diverged on trial {trial}"
    return True, "5 trials bitwise identical"


def _suite_fused_equivalence(cfg: ModelConfig, seed: int) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    base = init_base(cfg, seed=seed)
    adapter = AdapterSet.init(cfg, seed=seed + 1)
    for per in adapter.layers:
        for pair in per.values():
            pair.b.data = (rng.standard_normal(pair.b.shape) * 0.1
                           ).astype(pair.b.data.dtype)
    s_f = engine.new_session(base, adapter)
    s_s = engine.new_session(base, adapter)
    prompt = [int(t) for t in rng.integers(0, cfg.vocab_size, 16)]
    t_f = engine.prefill(s_f, prompt)
    t_s = engine.prefill(s_s, prompt)
    worst = 0.0
    for _ in range(100):
        t_f = engine.decode_step_fused(s_f, t_f)
        t_s = engine.decode_step_sequential(s_s, t_s)
        lf, ls = s_f.last_logits, s_s.last_logits
        denom = max(np.max(np.abs(lf)), np.max(np.abs(ls)), 1e-12)
        worst = max(worst, float(np.max(np.abs(lf - ls)) / denom))
        if t_f != t_s:
            return False, "greedy tokens diverged"
        if worst > 1e-5:
            return False, f"relative logit gap {worst:.3e}"
    return True, f"100 steps, worst relative gap {worst:.3e}"


def _suite_ledger_asymmetry(cfg: ModelConfig, seed: int) -> tuple[bool, str]:
    base = init_base(cfg, seed=seed)
    adapter = AdapterSet.init(cfg, seed=seed + 1)
    counts = {}
    for name, step in (("fused", engine.decode_step_fused),
                       ("sequential", engine.decode_step_sequential)):
        session = engine.new_session(base, adapter)
        tok = engine.prefill(session, [1, 2, 3, 4])
        before = session.ledger.snapshot()
        for _ in range(10):
            tok = step(session, tok)
        after = session.ledger.snapshot()
        counts[name] = {k: after[k] - before[k] for k in
                        ("decode_steps", "param_passes", "kv_read_events")}
    ok = (counts["fused"] == {"decode_steps": 10, "param_passes": 10, "kv_read_events": 10}
          and counts["sequential"] == {"decode_steps": 10, "param_passes": 20,
                                       "kv_read_events": 10})
    return ok, f"fused {counts['fused']['param_passes']}/10 passes, " \
               f"sequential {counts['sequential']['param_passes']}/10, " \
               f"kv reads 10/10"


def _suite_gradient_partition(seed: int) -> tuple[bool, str]:
    cfg = ModelConfig(num_layers=2, hidden_dim=16, num_heads=2, num_kv_heads=1,
                      head_dim=8, ffn_dim=16, vocab_size=24, precision="f64")
    base = init_base(cfg, seed=seed)
    adapter = AdapterSet.init(cfg, rank=2, alpha=4.0, seed=seed + 1)
    rng = np.random.default_rng(seed)
    for per in adapter.layers:
        for pair in per.values():
            pair.a.data = rng.standard_normal(pair.a.shape) * 0.3
            pair.b.data = rng.standard_normal(pair.b.shape) * 0.3
    toks = [int(t) for t in rng.integers(0, cfg.vocab_size, 6)]

    with GradTape() as tape:
        loss = training.sequence_loss(base, adapter, toks, "icarus")
        tape.backward(loss)
    for _, t in base.named():
        if t.grad is not None:
            return False, "a base tensor received a gradient"

    probe = adapter.pair(0, "q").a
    got = probe.grad.copy()

    def f(arr: np.ndarray) -> float:
        saved = probe.data
        probe.data = arr
        val = float(training.sequence_loss(base, adapter, toks, "icarus").data)
        probe.data = saved
        return val

    want = finite_difference_grad(f, probe.data.copy())
    denom = max(float(np.max(np.abs(want))), 1e-12)
    rel = float(np.max(np.abs(got - want)) / denom)
    if rel > 1e-4:
        return False, f"adapter gradient off by {rel:.3e}"
    return True, f"base grads absent, adapter grad rel err {rel:.3e}"


def _suite_namespace_theorem(cfg: ModelConfig, seed: int) -> tuple[bool, str]:
    base = init_base(cfg, seed=seed)
    agents = simulate.make_agents(cfg, 2, seed=seed + 1)
    probe = simulate.namespace_probe(base, agents, 2, prompt_len=64, seed=seed)
    ratio = probe["peak_ratio"]
    exact = probe["baseline"]["prefill_tokens"] == 2 * probe["icarus"]["prefill_tokens"]
    ok = (1.0 <= ratio <= 2.0) and exact
    return ok, f"peak ratio {ratio:.3f}, prefill {probe['baseline']['prefill_tokens']}" \
               f" vs {probe['icarus']['prefill_tokens']}"


def cmd_verify(args, file_cfg: dict) -> int:
    cfg = _model_config(file_cfg)
    seed = _effective_seed(args, file_cfg)
    suites = [
        ("encoder-purity", lambda: _suite_encoder_purity(cfg, seed)),
        ("fused-equivalence", lambda: _suite_fused_equivalence(cfg, seed)),
        ("ledger-asymmetry", lambda: _suite_ledger_asymmetry(cfg, seed)),
        ("gradient-partition", lambda: _suite_gradient_partition(seed)),
        ("namespace-theorem", lambda: _suite_namespace_theorem(cfg, seed)),
    ]
    lines = []
    all_ok = True
    for name, fn in suites:
        ok, detail = fn()
        all_ok = all_ok and ok
        lines.append(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    report = "\n".join(lines) + "\n"
    digest = hashlib.sha256(report.encode()).hexdigest()
    report += f"summary {('pass' if all_ok else 'FAIL')} {digest[:16]}\n"
    sys.stdout.write(report)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs: dict = {}
    _write(out_dir, "verify.txt", report, outputs)
    _manifest(out_dir, "verify", seed, {"model": json.loads(cfg.canonical_json())},
              outputs)
    return 0 if all_ok else 1


# ---------------------------------------------------------------------------
# train


def cmd_train(args, file_cfg: dict) -> int:
    cfg = _model_config(file_cfg)
    seed = _effective_seed(args, file_cfg)
    corpus = ToyCorpus(**_seeded_section(args, file_cfg, "corpus", seed))
    tc_base = _seeded_section(args, file_cfg, "train", seed)
    tc_base.pop("mode", None)  # the flag owns mode selection
    if args.steps is not None:
        tc_base["steps"] = args.steps
    modes = ("icarus", "conventional") if args.mode == "both" else (args.mode,)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs: dict = {}
    resolved = {"model": json.loads(cfg.canonical_json()), "corpus": asdict(corpus),
                "train": tc_base, "modes": list(modes)}
    for mode in modes:
        tconf = TrainConfig(mode=mode, **tc_base)
        result = training.train_loop(cfg, tconf, corpus)
        trace = "step,mode,loss\n" + "".join(l + "\n" for l in result.trace_lines())
        _write(out_dir, f"trace_{mode}.csv", trace, outputs)
        blob_path = out_dir / f"adapters_{mode}.ckpt"
        checkpoint.save_adapters(blob_path, result.adapters)
        _write_bytes(out_dir, blob_path.name, blob_path.read_bytes(), outputs)
        sys.stdout.write(f"{mode}: {len(result.trace)} steps, "
                         f"start {result.loss_start:.4f} final {result.loss_final:.4f}\n"
                         if result.trace else f"{mode}: 0 steps\n")
    _manifest(out_dir, "train", seed, resolved, outputs)
    return 0


# ---------------------------------------------------------------------------
# sim


def cmd_sim(args, file_cfg: dict) -> int:
    cfg = _model_config(file_cfg)
    seed = _effective_seed(args, file_cfg)
    wl_kwargs = _seeded_section(args, file_cfg, "workload", seed)
    if args.agents is not None:
        wl_kwargs["num_agents"] = args.agents
    workload = WorkloadConfig(**wl_kwargs)
    cost = CostModel(**file_cfg.get("cost", {}))
    sim_cfg = file_cfg.get("sim", {})

    qps_list = [float(q) for q in args.qps.split(",")] if args.qps else \
        [float(q) for q in sim_cfg.get("qps", [0.5, 1.0, 2.0, 4.0])]
    budget_mb = args.budget_mb if args.budget_mb is not None else \
        float(sim_cfg.get("budget_mb", 96.0))
    swap_mb = float(sim_cfg.get("swap_budget_mb", 4 * budget_mb))
    eviction = args.eviction or sim_cfg.get("eviction", "recompute")
    path = args.path or sim_cfg.get("path", "fused")
    modes = ("baseline", "icarus") if args.mode in (None, "both") else (args.mode,)

    base = init_base(cfg, seed=seed)
    agents = simulate.make_agents(cfg, workload.num_agents, seed=seed + 1)
    reports = simulate.sweep(
        workload, qps_list, modes, base, agents,
        budget_bytes=int(budget_mb * (1 << 20)), cost=cost, eviction=eviction,
        swap_budget_bytes=int(swap_mb * (1 << 20)), path=path)

    table = simulate.RunReport.csv_header() + "\n" + \
        "".join(r.as_row() + "\n" for r in reports)
    summary_lines = []
    for r in reports:
        summary_lines.append(
            f"mode={r.mode} qps={r.qps:g} p95_ms={r.p95_latency_ms:.1f} "
            f"throughput_rps={r.throughput_rps:.3f} evictions={r.eviction_count} "
            f"hit_tokens={r.prefix_hit_tokens} peak_mb={r.peak_kv_bytes / (1 << 20):.1f}")
    summary = "\n".join(summary_lines) + "\n"
    sys.stdout.write(summary)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs: dict = {}
    _write(out_dir, "sweep.csv", table, outputs)
    _write(out_dir, "summary.txt", summary, outputs)
    resolved = {"model": json.loads(cfg.canonical_json()),
                "workload": asdict(workload), "cost": asdict(cost),
                "qps": qps_list, "budget_mb": budget_mb, "swap_budget_mb": swap_mb,
                "eviction": eviction, "path": path, "modes": list(modes)}
    _manifest(out_dir, "sim", seed, resolved, outputs)
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="icarus",
                                description="shared-cache serving toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="JSON config file")
    common.add_argument("--seed", type=int, default=None,
                        help="master seed (default: config file seed, else 0)")
    common.add_argument("--out", default="icarus-out", help="output directory")

    v = sub.add_parser("verify", parents=[common],
                       help="run the correctness suites")
    v.set_defaults(fn=cmd_verify)

    t = sub.add_parser("train", parents=[common],
                       help="train adapters on the toy corpus")
    t.add_argument("--mode", choices=["icarus", "conventional", "both"],
                   default="both")
    t.add_argument("--steps", type=int, default=None)
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("sim", parents=[common],
                       help="serving sweep over qps and modes")
    s.add_argument("--mode", choices=["baseline", "icarus", "both"], default=None)
    s.add_argument("--agents", type=int, default=None)
    s.add_argument("--qps", default=None, help="comma-separated qps list")
    s.add_argument("--budget-mb", type=float, default=None)
    s.add_argument("--eviction", choices=["recompute", "swap"], default=None)
    s.add_argument("--path", choices=["fused", "sequential"], default=None)
    s.set_defaults(fn=cmd_sim)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        file_cfg = _load_config(args.config)
        return args.fn(args, file_cfg)
    except (IcarusError, ValueError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
