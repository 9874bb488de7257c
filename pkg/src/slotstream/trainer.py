"""Policy-consistent training on toy sequence tasks.

A training sample materializes the full streaming layout offline: source
tokens in their position slots, PAD tokens filling every slot to capacity,
role blocks, and target tokens (including segment/end markers) at the
positions the allocator would assign online. The policy mask reproduces
streaming visibility, and the loss reads each target's logits from its
temporal predecessor row (the assistant role block for the first target of
a phase, otherwise the previous target).

Ablations reuse the same pipeline with either the mask or the layout
swapped out: mask_mode="causal" trains on the slot layout with plain
causal visibility, layout_mode="contiguous" trains on the recompute layout
with the policy mask.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .engine import Strategy, run_stream
from .kv_cache import default_layout_mask
from .layout import AllocationState, LayoutEntry, LayoutPlan
from .masking import build_policy_mask, _role_run_kinds
from .model import Transformer
from .policy import PolicySpec, WAIT_K, waitk_g
from .tokens import EOS_ID, EOSEG_ID, FIRST_CONTENT_ID, PAD_ID, ROLE_ASST_ID, ROLE_USER_ID, Tag

COPY_MAP = "copy-map"
LOCAL_REORDER = "local-reorder"


class TrainerError(ValueError):
    pass


@dataclass(frozen=True)
class ToyCorpusSpec:
    task: str = COPY_MAP
    vocab_size: int = 32
    n_pairs: int = 200
    src_len_range: tuple[int, int] = (12, 28)
    seed: int = 0

    def __post_init__(self) -> None:
        if self.task not in (COPY_MAP, LOCAL_REORDER):
            raise TrainerError(f"unknown task {self.task!r}")
        if self.vocab_size <= FIRST_CONTENT_ID + 1:
            raise TrainerError("vocab too small for content tokens")
        lo, hi = self.src_len_range
        if lo < 1 or hi < lo:
            raise TrainerError("bad src_len_range")


def token_map(spec: ToyCorpusSpec) -> dict[int, int]:
    """Fixed random bijection over content IDs; the learning target."""
    ids = list(range(FIRST_CONTENT_ID, spec.vocab_size))
    rng = np.random.default_rng([spec.seed, 0xC0FFEE])
    shuffled = list(rng.permutation(ids))
    return dict(zip(ids, shuffled))


def generate_pairs(spec: ToyCorpusSpec) -> list[tuple[list[int], list[int]]]:
    rng = np.random.default_rng([spec.seed, 1])
    mapping = token_map(spec)
    lo, hi = spec.src_len_range
    pairs = []
    for _ in range(spec.n_pairs):
        n = int(rng.integers(lo, hi + 1))
        src = [int(t) for t in
               rng.integers(FIRST_CONTENT_ID, spec.vocab_size, size=n)]
        tgt = [mapping[t] for t in src]
        if spec.task == LOCAL_REORDER:
            for i in range(0, n - 1, 2):
                tgt[i], tgt[i + 1] = tgt[i + 1], tgt[i]
        pairs.append((src, tgt))
    return pairs


def segment_source(source: Sequence[int], L_slot: int) -> list[list[int]]:
    """Consecutive chunks of size L_slot; the final chunk may be shorter."""
    if L_slot < 1:
        raise TrainerError("L_slot must be >= 1")
    src = list(source)
    return [src[i:i + L_slot] for i in range(0, len(src), L_slot)]


def simulate_schedule(policy: PolicySpec, src_len: int,
                      tgt_len: int) -> tuple[list[str], list[int]]:
    """Emission plan for teacher forcing: per-emission kinds
    ('content'|'eoseg'|'eos') and delays g. Content tokens are scheduled
    proportionally to the source prefix read so far."""
    if policy.kind == WAIT_K:
        kinds = ["content"] * tgt_len + ["eos"]
        g = [waitk_g(j, policy.k, src_len) for j in range(1, tgt_len + 1)]
        g.append(waitk_g(tgt_len + 1, policy.k, src_len))
        return kinds, g
    kinds: list[str] = []
    g: list[int] = []
    src_read = 0
    emitted = 0
    while src_read < src_len:
        src_read = min(src_read + policy.n, src_len)
        writable = (tgt_len * src_read) // src_len
        seg = min(writable - emitted, policy.write_cap - 1)
        for _ in range(seg):
            kinds.append("content")
            g.append(src_read)
            emitted += 1
        if src_read < src_len:
            kinds.append("eoseg")
            g.append(src_read)
    while emitted < tgt_len:
        kinds.append("content")
        g.append(src_len)
        emitted += 1
    kinds.append("eos")
    g.append(src_len)
    return kinds, g


def emission_tokens(target: Sequence[int], kinds: Sequence[str]) -> list[int]:
    it = iter(target)
    out = []
    for kind in kinds:
        if kind == "content":
            out.append(next(it))
        elif kind == "eoseg":
            out.append(EOSEG_ID)
        else:
            out.append(EOS_ID)
    return out


@dataclass
class TrainingSample:
    layout: LayoutPlan
    mask: np.ndarray
    g: list[int]
    target_rows: list[int]   # layout row of each emitted token, emission order
    pred_rows: list[int]     # row whose logits predict that token
    source_rows: list[int]   # layout row of each source token, reading order

    def tokens(self) -> list[int]:
        return [e.token_id for e in self.layout.entries]

    def positions(self) -> list[int]:
        return [e.position_id for e in self.layout.entries]

    def loss_mask(self) -> np.ndarray:
        """True exactly on the TARGET rows whose tokens are scored."""
        out = np.zeros(len(self.layout.entries), dtype=bool)
        out[self.target_rows] = True
        return out

    def __len__(self) -> int:
        return len(self.layout.entries)


def build_training_sample(source: Sequence[int], emissions: Sequence[int],
                          g: Sequence[int], L_slot: int,
                          role_user_len: int = 1, role_asst_len: int = 1,
                          prompt: Sequence[int] = (),
                          layout_mode: str = "slots",
                          mask_mode: str = "policy",
                          new_role_per_slot: bool = True,
                          pad_slots: bool = True) -> TrainingSample:
    """Materialize the offline layout and mask for one (source, emissions,
    delays) triple. emissions include segment/end markers; len(g) must equal
    len(emissions)."""
    if len(g) != len(emissions):
        raise TrainerError("need one delay per emitted token")
    for a, b in zip(g, list(g)[1:]):
        if b < a:
            raise TrainerError("delays must be monotone non-decreasing")
    if g and g[-1] > len(source):
        raise TrainerError("delays exceed source length")

    entries: list[LayoutEntry] = []
    if layout_mode == "contiguous":
        pos = 0
        for t in prompt:
            entries.append(LayoutEntry(t, pos, Tag.PROMPT)); pos += 1
        for _ in range(role_user_len):
            entries.append(LayoutEntry(ROLE_USER_ID, pos, Tag.ROLE)); pos += 1
        for t in source:
            entries.append(LayoutEntry(t, pos, Tag.SOURCE)); pos += 1
        for _ in range(role_asst_len):
            entries.append(LayoutEntry(ROLE_ASST_ID, pos, Tag.ROLE)); pos += 1
        for t in emissions:
            entries.append(LayoutEntry(t, pos, Tag.TARGET)); pos += 1
    elif layout_mode == "slots":
        alloc = AllocationState(L_slot, prompt_len=len(prompt),
                                role_user_len=role_user_len,
                                role_asst_len=role_asst_len,
                                new_role_per_slot=new_role_per_slot)
        for pl in alloc.initial_placements():
            tok = prompt[pl.position] if pl.tag == Tag.PROMPT else ROLE_USER_ID
            entries.append(LayoutEntry(tok, pl.position, pl.tag))
        placed = 0

        def place_sources(upto: int) -> None:
            nonlocal placed
            while placed < upto:
                for pl in alloc.place_source(1):
                    tok = source[placed] if pl.tag == Tag.SOURCE else ROLE_USER_ID
                    entries.append(LayoutEntry(tok, pl.position, pl.tag))
                placed += 1

        for tok, gj in zip(emissions, g):
            place_sources(gj)
            for pl in alloc.place_target(1):
                tid = tok if pl.tag == Tag.TARGET else ROLE_ASST_ID
                entries.append(LayoutEntry(tid, pl.position, pl.tag))
        place_sources(len(source))
        if pad_slots:
            used = {e.position_id for e in entries}
            for slot in alloc.slots:
                for p in range(slot.start_pos, slot.start_pos + L_slot):
                    if p not in used:
                        entries.append(LayoutEntry(PAD_ID, p, Tag.PAD))
        entries.sort(key=lambda e: e.position_id)
    else:
        raise TrainerError(f"unknown layout_mode {layout_mode!r}")

    layout = LayoutPlan(entries)
    if mask_mode == "policy":
        mask = build_policy_mask(layout, list(g))
    elif mask_mode == "causal":
        mask = default_layout_mask([e.tag for e in entries]).numpy()
    else:
        raise TrainerError(f"unknown mask_mode {mask_mode!r}")

    kinds = _role_run_kinds(layout)
    target_rows, pred_rows, source_rows = [], [], []
    last_candidate: Optional[int] = None
    for idx, e in enumerate(entries):
        if e.tag == Tag.SOURCE:
            source_rows.append(idx)
        if e.tag == Tag.ROLE and kinds[idx] == "asst":
            last_candidate = idx
        elif e.tag == Tag.TARGET:
            if last_candidate is None:
                # no assistant role marker: predict from the last source
                # available at emission time
                gj = g[len(target_rows)]
                last_candidate = source_rows[gj - 1]
            target_rows.append(idx)
            pred_rows.append(last_candidate)
            last_candidate = idx
    return TrainingSample(layout=layout, mask=mask, g=list(g),
                          target_rows=target_rows, pred_rows=pred_rows,
                          source_rows=source_rows)


def sample_from_pair(pair: tuple[list[int], list[int]], policy: PolicySpec,
                     L_slot: int, **kwargs) -> TrainingSample:
    source, target = pair
    kinds, g = simulate_schedule(policy, len(source), len(target))
    emissions = emission_tokens(target, kinds)
    return build_training_sample(source, emissions, g, L_slot, **kwargs)


def closed_form_length(src_len: int, n_emissions: int, g: Sequence[int],
                       L_slot: int, role_user_len: int = 1,
                       role_asst_len: int = 1, prompt_len: int = 0,
                       new_role_per_slot: bool = True) -> int:
    """Materialized entry count without building the layout: prompt, one
    padded slot plus user role per source chunk, one assistant role per slot
    phase that emits, and the emissions themselves."""
    n_slots = max(1, math.ceil(src_len / L_slot))
    n_user_roles = n_slots if new_role_per_slot else 1
    phases = {(gj - 1) // L_slot for gj in g}
    return (prompt_len + n_slots * L_slot + n_user_roles * role_user_len
            + len(phases) * role_asst_len + n_emissions)


def avg_sequence_length(pairs: Sequence[tuple[list[int], list[int]]],
                        policy: PolicySpec, L_slot: int,
                        role_user_len: int = 1, role_asst_len: int = 1) -> float:
    """Mean materialized training-sequence length over a corpus."""
    total = 0
    for pair in pairs:
        sample = sample_from_pair(pair, policy, L_slot,
                                  role_user_len=role_user_len,
                                  role_asst_len=role_asst_len)
        total += len(sample)
    return total / len(pairs)


def sample_loss(model: Transformer, sample: TrainingSample,
                inputs_embeds: Optional[torch.Tensor] = None,
                per_target: bool = False):
    """Cross-entropy of each emitted token at its predictor row."""
    logits, _ = model.forward(sample.tokens(), sample.positions(),
                              mask=sample.mask, inputs_embeds=inputs_embeds)
    rows = logits[sample.pred_rows]
    labels = torch.as_tensor(
        [sample.layout.entries[r].token_id for r in sample.target_rows])
    losses = torch.nn.functional.cross_entropy(rows, labels, reduction="none")
    return losses if per_target else losses.mean()


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    steps: int = 0
    wall_seconds: float = 0.0


def train_model(model: Transformer, samples: Sequence[TrainingSample],
                epochs: int = 4, lr: float = 3e-3, grad_clip: float = 1.0,
                seed: int = 0, weight_decay: float = 0.01) -> TrainResult:
    """Adam-style loop, one sample per step, deterministic shuffling."""
    opt = torch.optim.AdamW(model.parameters(), lr=lr,
                            weight_decay=weight_decay)
    rng = np.random.default_rng([seed, 2])
    result = TrainResult()
    start = time.monotonic()
    for _ in range(epochs):
        order = rng.permutation(len(samples))
        for i in order:
            opt.zero_grad()
            loss = sample_loss(model, samples[int(i)])
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
            opt.step()
            result.losses.append(float(loss.item()))
            result.steps += 1
    result.wall_seconds = time.monotonic() - start
    return result


def grad_visibility_report(model: Transformer, sample: TrainingSample,
                           emission_indices: Optional[Sequence[int]] = None
                           ) -> list[tuple[int, int, float]]:
    """Per-emission gradient leakage scan.

    For each checked emission j, computes d loss_j / d embed(s_i) for every
    source token i and returns (j, i, grad_norm) for each i > g(j) with a
    non-zero gradient. An empty list certifies the mask."""
    tokens = sample.tokens()
    positions = sample.positions()
    violations = []
    if emission_indices is None:
        emission_indices = range(len(sample.target_rows))
    for j in emission_indices:
        x = model.embed(torch.as_tensor(tokens, dtype=torch.long)).detach()
        x.requires_grad_(True)
        losses = sample_loss(model, sample, inputs_embeds=x, per_target=True)
        grad, = torch.autograd.grad(losses[j], x)
        for i, row in enumerate(sample.source_rows, start=1):
            if i <= sample.g[j]:
                continue
            norm = float(grad[row].abs().max().item())
            if norm != 0.0:
                violations.append((j, i, norm))
    return violations


def fd_loss_derivative(model: Transformer, sample: TrainingSample,
                       emission_index: int, row: int, dim: int,
                       eps: float = 1e-4) -> float:
    """Central finite difference of loss(emission) wrt one embedding
    coordinate, for cross-checking autograd zeros."""
    tokens = sample.tokens()
    base = model.embed(torch.as_tensor(tokens, dtype=torch.long)).detach()

    def value(shift: float) -> float:
        x = base.clone()
        x[row, dim] += shift
        with torch.no_grad():
            losses = sample_loss(model, sample, inputs_embeds=x,
                                 per_target=True)
        return float(losses[emission_index].item())

    return (value(eps) - value(-eps)) / (2 * eps)


# -- evaluation and ablation presets ----------------------------------------


def streaming_accuracy(model: Transformer, pairs, policy: PolicySpec,
                       strategy: Strategy, role_user_len: int = 1,
                       role_asst_len: int = 1) -> float:
    """Greedy streaming decode; mean per-token accuracy against references.
    Aligned-position matches over max(len(ref), len(hyp))."""
    scores = []
    for source, target in pairs:
        trace = run_stream(model, source, policy, strategy,
                           role_user_len=role_user_len,
                           role_asst_len=role_asst_len,
                           max_writes=len(target) + 8)
        hyp = trace.content_outputs()
        match = sum(1 for a, b in zip(hyp, target) if a == b)
        scores.append(match / max(len(target), len(hyp), 1))
    return float(np.mean(scores))


ABLATIONS = {
    # name: (layout_mode, mask_mode, eval strategy kind)
    "full": ("slots", "policy", "expost"),
    "no_mask": ("slots", "causal", "expost"),
    "no_slot": ("contiguous", "policy", "naive-reuse"),
}


def run_ablation(name: str, model: Transformer, train_pairs, eval_pairs,
                 policy: PolicySpec, L_slot: int, epochs: int = 4,
                 lr: float = 3e-3, seed: int = 0) -> dict:
    """Train one ablation arm and return its streaming eval accuracy."""
    if name not in ABLATIONS:
        raise TrainerError(f"unknown ablation {name!r}")
    layout_mode, mask_mode, eval_kind = ABLATIONS[name]
    samples = [sample_from_pair(p, policy, L_slot, layout_mode=layout_mode,
                                mask_mode=mask_mode) for p in train_pairs]
    result = train_model(model, samples, epochs=epochs, lr=lr, seed=seed)
    accuracy = streaming_accuracy(model, eval_pairs, policy,
                                  Strategy(eval_kind, L_slot=L_slot))
    return {"name": name, "accuracy": accuracy,
            "final_loss": result.losses[-1], "steps": result.steps,
            "wall_seconds": result.wall_seconds}
