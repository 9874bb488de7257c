"""Command-line entry point: verification suites, strategy comparisons,
slot sweeps, toy training, and layout/trace inspection.

Outputs are flat CSV files plus a JSON manifest (config echo, git revision,
seed) per run directory; every subcommand is deterministic given
(config, seed) and repeated runs produce byte-identical CSV.

Exit codes: 0 success, 1 property/experiment failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import subprocess
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .engine import (EXPOST, NAIVE_REUSE, RECOMPUTE, STRATEGY_KINDS, Strategy,
                     compare_traces, run_stream, uncached_replay)
from .masking import build_policy_mask, oracle_mask
from .metrics import FlopsModel, cumulative_flops, flops_forward, laal
from .model import ALIBI, ROTARY, MacCounter, ModelConfig, init_model
from .checkpoint import save_checkpoint
from .policy import PolicySpec, PolicyError
from .tokens import FIRST_CONTENT_ID
from .trainer import (COPY_MAP, ToyCorpusSpec, avg_sequence_length,
                      generate_pairs, grad_visibility_report, sample_from_pair,
                      streaming_accuracy, train_model)


def _git_revision() -> Optional[str]:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"],
                             capture_output=True, text=True, timeout=5)
        return out.stdout.strip() or None
    except OSError:
        return None


def _parse_lslot(text: str) -> tuple[int, int]:
    """'N' or 'N,infer=M'; inference L_slot defaults to the training one."""
    parts = text.split(",")
    train = int(parts[0])
    infer = train
    for p in parts[1:]:
        key, _, val = p.partition("=")
        if key != "infer":
            raise ValueError(f"bad --lslot component {p!r}")
        infer = int(val)
    return train, infer


def _model_config(args: argparse.Namespace) -> ModelConfig:
    return ModelConfig(d_model=args.d_model, n_heads=args.n_heads,
                       n_layers=args.n_layers, d_ff=args.d_ff,
                       vocab_size=args.vocab, pos_scheme=args.pos_scheme,
                       seed=args.seed)


def _outdir(args: argparse.Namespace) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(args: argparse.Namespace, outdir: Path) -> None:
    manifest = {
        "command": args.command,
        "seed": args.seed,
        "git_revision": _git_revision(),
        "config": {k: v for k, v in vars(args).items() if k != "func"},
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=2))


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)


def _random_source(rng, vocab: int, n: int) -> list[int]:
    return [int(t) for t in rng.integers(FIRST_CONTENT_ID, vocab, size=n)]


# -- verify ------------------------------------------------------------------


def cmd_verify(args: argparse.Namespace) -> int:
    torch.manual_seed(args.seed)
    rng = np.random.default_rng(args.seed)
    trials = 8 if args.quick else 25
    results: list[tuple[str, bool, str]] = []
    fault_kind = (NAIVE_REUSE if args.inject_fault == "naive-reuse" else EXPOST)

    # 1. uncached replay equivalence (+ zero-recompute accounting)
    worst = 0.0
    zero_recompute = True
    for t in range(trials):
        scheme = ROTARY if t % 2 == 0 else ALIBI
        cfg = ModelConfig(d_model=16, n_heads=2, n_layers=2, d_ff=32,
                          vocab_size=24, pos_scheme=scheme,
                          seed=args.seed + t)
        model = init_model(cfg)
        source = _random_source(rng, cfg.vocab_size, int(rng.integers(4, 20)))
        policy = (PolicySpec("wait-k", k=int(rng.integers(1, 4)))
                  if t % 2 == 0 else PolicySpec("read-n", n=int(rng.integers(1, 4))))
        strat = Strategy(fault_kind, L_slot=int(rng.integers(1, 9)))
        trace = run_stream(model, source, policy, strat,
                           max_writes=len(source) + 4)
        report = compare_traces(trace, uncached_replay(model, trace))
        worst = max(worst, report["max_logit_diff"])
        zero_recompute &= not any(s.recompute for s in trace.steps)
    ok = worst <= 1e-5 and zero_recompute
    results.append(("replay-equivalence", ok, f"max_logit_diff={worst:.3g}"))

    # 2. target-position invariance
    ok2 = True
    for t in range(trials):
        cfg = ModelConfig(d_model=16, n_heads=2, n_layers=1, d_ff=32,
                          vocab_size=24, seed=args.seed + t)
        model = init_model(cfg)
        source = _random_source(rng, cfg.vocab_size, int(rng.integers(4, 20)))
        strat = Strategy(EXPOST, L_slot=int(rng.integers(1, 9)))
        trace = run_stream(model, source, PolicySpec("wait-k", k=2), strat,
                           max_writes=len(source) + 4)
        assigned = trace.target_positions()
        final = [e[1] for e in trace.encoded if e[2] == "TARGET"]
        ok2 &= assigned[: len(final)] == final
    results.append(("target-position-invariance", ok2, "exact integer equality"))

    # 3. mask oracle agreement on randomized samples
    agree = True
    for t in range(trials):
        pairs = generate_pairs(ToyCorpusSpec(vocab_size=20, n_pairs=1,
                                             src_len_range=(3, 12),
                                             seed=args.seed + t))
        policy = PolicySpec("wait-k", k=1 + t % 4)
        sample = sample_from_pair(pairs[0], policy, L_slot=1 + t % 5)
        agree &= bool(np.array_equal(
            build_policy_mask(sample.layout, sample.g),
            oracle_mask(sample.layout, sample.g)))
    results.append(("mask-oracle-agreement", agree, f"{trials} random layouts"))

    # 4. gradient visibility
    cfg = ModelConfig(d_model=16, n_heads=2, n_layers=2, d_ff=32,
                      vocab_size=20, seed=args.seed)
    model = init_model(cfg)
    violations = 0
    for t in range(2 if args.quick else 5):
        pairs = generate_pairs(ToyCorpusSpec(vocab_size=20, n_pairs=1,
                                             src_len_range=(4, 8),
                                             seed=args.seed + 100 + t))
        sample = sample_from_pair(pairs[0], PolicySpec("wait-k", k=2), L_slot=3)
        violations += len(grad_visibility_report(model, sample))
    results.append(("gradient-visibility", violations == 0,
                    f"{violations} leaked pairs"))

    # 5. analytic vs instrumented FLOPs
    fm = FlopsModel.from_config(cfg)
    worst_rel = 0.0
    cache = model.new_cache()
    c = 0
    for m in (1, 3, 5):
        counter = MacCounter()
        tokens = _random_source(rng, cfg.vocab_size, m)
        with torch.no_grad():
            _, delta = model.forward(tokens, list(range(c, c + m)),
                                     cache=cache, flop_counter=counter)
        cache.append(delta, tags=["SOURCE"] * m)
        analytic = flops_forward(fm, c, m)
        worst_rel = max(worst_rel, abs(counter.flops - analytic) / analytic)
        c += m
    results.append(("flops-identity", worst_rel <= 0.01,
                    f"rel_err={worst_rel:.3g}"))

    failed = False
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        failed |= not ok
    return 1 if failed else 0


# -- compare -----------------------------------------------------------------


def cmd_compare(args: argparse.Namespace) -> int:
    outdir = _outdir(args)
    _write_manifest(args, outdir)
    cfg = _model_config(args)
    train_l, infer_l = _parse_lslot(args.lslot)
    corpus = ToyCorpusSpec(vocab_size=cfg.vocab_size, n_pairs=args.corpus_size,
                           seed=args.seed)
    pairs = generate_pairs(corpus)
    split = max(1, len(pairs) // 5)
    eval_pairs, train_pairs = pairs[:split], pairs[split:]
    model = init_model(cfg)
    if args.epochs > 0:
        policy = PolicySpec.parse(args.policies.split(",")[0])
        samples = [sample_from_pair(p, policy, train_l) for p in train_pairs]
        train_model(model, samples, epochs=args.epochs, lr=args.lr,
                    seed=args.seed)
    rows = []
    for kind in (s for s in args.strategies.split(",") if s):
        if kind not in STRATEGY_KINDS:
            raise ValueError(f"unknown strategy {kind!r}")
        for ptext in args.policies.split(","):
            policy = PolicySpec.parse(ptext)
            strat = Strategy(kind, L_slot=infer_l)
            laals, gflops, accs = [], [], []
            for source, target in eval_pairs:
                trace = run_stream(model, source, policy, strat,
                                   max_writes=len(target) + 8)
                hyp = trace.content_outputs()
                delays = trace.delays()
                if delays:
                    laals.append(laal(delays, len(source),
                                      max(len(trace.outputs), 1), len(target)))
                gflops.append(cumulative_flops(trace) / 1e9)
                match = sum(1 for a, b in zip(hyp, target) if a == b)
                accs.append(match / max(len(target), len(hyp), 1))
            k_or_n = policy.k if policy.kind == "wait-k" else policy.n
            rows.append([kind, str(policy), k_or_n,
                         f"{np.mean(laals):.6f}", f"{np.median(gflops):.9f}",
                         f"{np.mean(accs):.6f}"])
    _write_csv(outdir / "compare.csv",
               ["strategy", "policy", "k_or_n", "laal", "cum_gflops",
                "token_accuracy"], rows)
    print(f"wrote {outdir / 'compare.csv'} ({len(rows)} rows)")
    return 0


# -- slot sweep ---------------------------------------------------------------


def cmd_slot_sweep(args: argparse.Namespace) -> int:
    outdir = _outdir(args)
    _write_manifest(args, outdir)
    cfg = _model_config(args)
    policy = PolicySpec.parse(args.policy)
    corpus = ToyCorpusSpec(vocab_size=cfg.vocab_size, n_pairs=args.corpus_size,
                           seed=args.seed)
    pairs = generate_pairs(corpus)
    split = max(1, len(pairs) // 5)
    eval_pairs, train_pairs = pairs[:split], pairs[split:]
    rows = []
    for L in (int(x) for x in args.lslots.split(",")):
        avg_len = avg_sequence_length(pairs, policy, L)
        model = init_model(cfg)
        if args.epochs > 0:
            samples = [sample_from_pair(p, policy, L) for p in train_pairs]
            train_model(model, samples, epochs=args.epochs, lr=args.lr,
                        seed=args.seed)
        acc = streaming_accuracy(model, eval_pairs, policy,
                                 Strategy(EXPOST, L_slot=L))
        rows.append([L, f"{avg_len:.6f}", f"{acc:.6f}"])
    _write_csv(outdir / "slot_sweep.csv", ["L_slot", "avg_len", "accuracy"],
               rows)
    print(f"wrote {outdir / 'slot_sweep.csv'} ({len(rows)} rows)")
    return 0


# -- train ---------------------------------------------------------------------


def cmd_train(args: argparse.Namespace) -> int:
    outdir = _outdir(args)
    _write_manifest(args, outdir)
    cfg = _model_config(args)
    train_l, _ = _parse_lslot(args.lslot)
    policy = PolicySpec.parse(args.policy)
    corpus = ToyCorpusSpec(vocab_size=cfg.vocab_size, n_pairs=args.corpus_size,
                           seed=args.seed)
    pairs = generate_pairs(corpus)
    model = init_model(cfg)
    samples = [sample_from_pair(p, policy, train_l) for p in pairs]
    result = train_model(model, samples, epochs=args.epochs, lr=args.lr,
                         seed=args.seed)
    if result.losses and not np.isfinite(result.losses[-1]):
        print("FAIL training diverged (non-finite loss)")
        return 1
    save_checkpoint(model, outdir / "model.ssck")
    _write_csv(outdir / "loss.csv", ["step", "loss"],
               [[i, f"{v:.6f}"] for i, v in enumerate(result.losses)])
    print(f"trained {result.steps} steps; final loss "
          f"{result.losses[-1]:.4f}; checkpoint at {outdir / 'model.ssck'}")
    return 0


# -- layout / demo --------------------------------------------------------------


def cmd_layout(args: argparse.Namespace) -> int:
    train_l, _ = _parse_lslot(args.lslot)
    policy = PolicySpec.parse(args.policy)
    pairs = generate_pairs(ToyCorpusSpec(vocab_size=args.vocab, n_pairs=1,
                                         src_len_range=(args.src_len,
                                                        args.src_len),
                                         seed=args.seed))
    sample = sample_from_pair(pairs[0], policy, train_l)
    print(sample.layout.serialize())
    return 0


def cmd_demo(args: argparse.Namespace) -> int:
    cfg = _model_config(args)
    model = init_model(cfg)
    _, infer_l = _parse_lslot(args.lslot)
    policy = PolicySpec.parse(args.policy)
    rng = np.random.default_rng(args.seed)
    source = _random_source(rng, cfg.vocab_size, args.src_len)
    trace = run_stream(model, source, policy, Strategy(args.strategy,
                                                       L_slot=infer_l))
    print(trace.serialize())
    return 0


# -- argument plumbing -----------------------------------------------------------


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/latest")
    p.add_argument("--quick", action="store_true")
    p.add_argument("--d-model", type=int, default=32)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--d-ff", type=int, default=64)
    p.add_argument("--vocab", type=int, default=32)
    p.add_argument("--pos-scheme", default=ROTARY, choices=[ROTARY, ALIBI, "none"])
    p.add_argument("--lslot", default="8",
                   help="training slot length, optionally ',infer=M'")
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--config", default=None,
                   help="JSON file whose keys override the flags above")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slotstream")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the invariant suite")
    _add_common(p)
    p.add_argument("--inject-fault", default=None, choices=["naive-reuse"])
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("compare", help="strategy/policy comparison CSV")
    _add_common(p)
    p.add_argument("--strategies", default="expost,recompute,conversational")
    p.add_argument("--policies", default="wait-k:1,wait-k:3,wait-k:5,wait-k:7")
    p.add_argument("--corpus-size", type=int, default=50)
    p.add_argument("--epochs", type=int, default=1)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("slot-sweep", help="L_slot sequence-length/accuracy sweep")
    _add_common(p)
    p.add_argument("--lslots", default="4,8,16,32,64,128")
    p.add_argument("--policy", default="wait-k:3")
    p.add_argument("--corpus-size", type=int, default=50)
    p.add_argument("--epochs", type=int, default=0)
    p.set_defaults(func=cmd_slot_sweep)

    p = sub.add_parser("train", help="train the full method and checkpoint it")
    _add_common(p)
    p.add_argument("--policy", default="wait-k:3")
    p.add_argument("--corpus-size", type=int, default=200)
    p.add_argument("--epochs", type=int, default=4)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("layout", help="print a materialized training layout")
    _add_common(p)
    p.add_argument("--policy", default="wait-k:2")
    p.add_argument("--src-len", type=int, default=7)
    p.set_defaults(func=cmd_layout)

    p = sub.add_parser("demo", help="stream one source and dump the trace")
    _add_common(p)
    p.add_argument("--strategy", default=EXPOST, choices=list(STRATEGY_KINDS))
    p.add_argument("--policy", default="wait-k:2")
    p.add_argument("--src-len", type=int, default=10)
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        overrides = json.loads(Path(args.config).read_text())
        for key, value in overrides.items():
            if not hasattr(args, key):
                parser.error(f"unknown config key {key!r}")
            setattr(args, key, value)
    try:
        return args.func(args)
    except (ValueError, PolicyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
