"""Streaming READ/WRITE engine over a shared decoder and KV cache.

Strategies:

  * expost          pre-allocated position slots; every token is encoded
                    exactly once and target positions never move.
  * recompute       contiguous layout, full cache rebuild on every READ.
  * naive-reuse     contiguous layout positions for new tokens but stale
                    cache entries are kept (the bug expost removes).
  * conversational  role-delimited turn per READ/WRITE alternation,
                    append-only contiguous positions.
  * grouped         independent source/target position spaces.

Emitted target tokens are position-assigned at emission and key/value
encoded lazily at the start of the next forward pass, so a token's cache
entry reflects exactly the context available when it was emitted. For the
expost strategy the per-step masks additionally hide TARGET entries from
SOURCE rows; baselines run plain causal-over-cache decoding.

Each WRITE step records the logits used for emission plus the full
(token, position, tag) context ending at the predictor entry, which lets
uncached_replay re-derive the same logits from a single fresh forward pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch

from .kv_cache import KvCache
from .layout import AllocationState
from .metrics import FlopsModel, flops_forward
from .model import Transformer
from .policy import PolicySpec, PolicyState, next_action
from .tokens import EOS_ID, EOSEG_ID, PAD_ID, ROLE_ASST_ID, ROLE_USER_ID, Tag

EXPOST = "expost"
RECOMPUTE = "recompute"
NAIVE_REUSE = "naive-reuse"
CONVERSATIONAL = "conversational"
GROUPED = "grouped"

STRATEGY_KINDS = (EXPOST, RECOMPUTE, NAIVE_REUSE, CONVERSATIONAL, GROUPED)


class EngineError(ValueError):
    pass


@dataclass(frozen=True)
class Strategy:
    kind: str
    L_slot: int = 8
    new_role_per_slot: bool = True
    # RECOMPUTE only: also re-encode the fixed prompt on every rebuild
    # (default keeps the prompt's cache entries)
    recompute_from_scratch: bool = False

    def __post_init__(self) -> None:
        if self.kind not in STRATEGY_KINDS:
            raise EngineError(f"unknown strategy {self.kind!r}")
        if self.L_slot < 1:
            raise EngineError("L_slot must be >= 1")


@dataclass
class StepRecord:
    action: str  # INIT | READ | WRITE
    tokens: list[int]
    positions: list[int]
    tags: list[str]
    flops: float
    cache_before: int
    cache_after: int
    recompute: bool = False
    emitted: Optional[int] = None
    logits: Optional[np.ndarray] = None
    context: Optional[list[tuple[int, int, str]]] = None


@dataclass
class StreamTrace:
    strategy: Strategy
    policy: str
    source: list[int]
    prompt: list[int]
    role_user_len: int
    role_asst_len: int
    steps: list[StepRecord] = field(default_factory=list)
    outputs: list[int] = field(default_factory=list)
    encoded: list[tuple[int, int, str]] = field(default_factory=list)
    capped: bool = False

    def write_steps(self) -> list[StepRecord]:
        return [s for s in self.steps if s.action == "WRITE"]

    def content_outputs(self) -> list[int]:
        return [t for t in self.outputs if t not in (EOS_ID, EOSEG_ID)]

    def total_flops(self) -> float:
        return float(sum(s.flops for s in self.steps))

    def target_positions(self) -> list[int]:
        """Position assigned to each emitted token, in emission order."""
        return [s.positions[0] for s in self.write_steps()]

    def delays(self) -> list[int]:
        """g(j): source tokens read before each emission."""
        from .policy import delays_from_trace
        return delays_from_trace(self)

    def serialize(self) -> str:
        header = {
            "kind": "header",
            "strategy": {"kind": self.strategy.kind,
                         "L_slot": self.strategy.L_slot,
                         "new_role_per_slot": self.strategy.new_role_per_slot,
                         "recompute_from_scratch":
                             self.strategy.recompute_from_scratch},
            "policy": self.policy,
            "source": self.source,
            "prompt": self.prompt,
            "role_user_len": self.role_user_len,
            "role_asst_len": self.role_asst_len,
            "outputs": self.outputs,
            "encoded": [list(e) for e in self.encoded],
            "capped": self.capped,
        }
        lines = [json.dumps(header)]
        for s in self.steps:
            lines.append(json.dumps({
                "kind": "step", "action": s.action, "tokens": s.tokens,
                "positions": s.positions, "tags": s.tags, "flops": s.flops,
                "cache_before": s.cache_before, "cache_after": s.cache_after,
                "recompute": s.recompute, "emitted": s.emitted,
                "logits": None if s.logits is None else [float(v) for v in s.logits],
                "context": None if s.context is None else [list(e) for e in s.context],
            }))
        return "\n".join(lines)

    @classmethod
    def parse(cls, text: str) -> "StreamTrace":
        lines = [json.loads(l) for l in text.strip().splitlines()]
        if not lines or lines[0].get("kind") != "header":
            raise EngineError("trace must start with a header line")
        h = lines[0]
        trace = cls(strategy=Strategy(**h["strategy"]), policy=h["policy"],
                    source=list(h["source"]), prompt=list(h["prompt"]),
                    role_user_len=h["role_user_len"],
                    role_asst_len=h["role_asst_len"],
                    outputs=list(h["outputs"]),
                    encoded=[tuple(e) for e in h["encoded"]],
                    capped=h["capped"])
        for rec in lines[1:]:
            if rec.get("kind") != "step":
                raise EngineError("unexpected trace line")
            trace.steps.append(StepRecord(
                action=rec["action"], tokens=list(rec["tokens"]),
                positions=list(rec["positions"]), tags=list(rec["tags"]),
                flops=rec["flops"], cache_before=rec["cache_before"],
                cache_after=rec["cache_after"], recompute=rec["recompute"],
                emitted=rec["emitted"],
                logits=None if rec["logits"] is None else np.asarray(rec["logits"]),
                context=None if rec["context"] is None
                else [tuple(e) for e in rec["context"]]))
        return trace


def stream_step_mask(cache_tags: Sequence[str],
                     new_tags: Sequence[str]) -> np.ndarray:
    """Per-step expost visibility: rows are the new entries, columns the
    cache followed by the new entries. Causal within the step; SOURCE rows
    never see TARGET columns."""
    c, m = len(cache_tags), len(new_tags)
    mask = np.zeros((m, c + m), dtype=bool)
    for r, rt in enumerate(new_tags):
        for j, ct in enumerate(cache_tags):
            mask[r, j] = not (rt == Tag.SOURCE and ct == Tag.TARGET)
        for j in range(r + 1):
            nt = new_tags[j]
            if j < r and rt == Tag.SOURCE and nt == Tag.TARGET:
                continue
            mask[r, c + j] = True
    return mask


def stream_causal_mask(tags: Sequence[str],
                       source_sees_targets: bool = False) -> np.ndarray:
    """Full-sequence mask for replaying a trace context in encode order."""
    n = len(tags)
    mask = np.zeros((n, n), dtype=bool)
    for r in range(n):
        if tags[r] == Tag.PAD:
            continue
        for c in range(r + 1):
            if tags[c] == Tag.PAD:
                continue
            if (not source_sees_targets and r != c
                    and tags[r] == Tag.SOURCE and tags[c] == Tag.TARGET):
                continue
            mask[r, c] = True
    return mask


class _ExpostPositions:
    def __init__(self, strategy: Strategy, prompt: Sequence[int],
                 role_user_len: int, role_asst_len: int, max_position: int):
        self.alloc = AllocationState(
            strategy.L_slot, prompt_len=len(prompt),
            role_user_len=role_user_len, role_asst_len=role_asst_len,
            max_position=max_position,
            new_role_per_slot=strategy.new_role_per_slot)
        self.prompt = list(prompt)

    def initial(self) -> list[tuple[int, int, str]]:
        out = []
        for pl in self.alloc.initial_placements():
            tok = self.prompt[pl.position] if pl.tag == Tag.PROMPT else ROLE_USER_ID
            out.append((tok, pl.position, pl.tag))
        return out

    def read(self, tokens: Sequence[int]) -> list[tuple[int, int, str]]:
        out = []
        it = iter(tokens)
        for pl in self.alloc.place_source(len(tokens)):
            tok = next(it) if pl.tag == Tag.SOURCE else ROLE_USER_ID
            out.append((tok, pl.position, pl.tag))
        return out

    def write_role(self) -> list[tuple[int, int, str]]:
        return [(ROLE_ASST_ID, pl.position, Tag.ROLE)
                for pl in self.alloc.place_asst_role()]

    def target_pos(self) -> int:
        return self.alloc.place_target(1)[-1].position


class _ContiguousPositions:
    """Shared position bookkeeping for the recompute/naive/conversational
    baselines: the ideal layout is always prompt, user role, sources,
    assistant role, targets (conversational repeats the role blocks)."""

    def __init__(self, kind: str, prompt: Sequence[int],
                 role_user_len: int, role_asst_len: int):
        self.kind = kind
        self.prompt = list(prompt)
        self.ru = role_user_len
        self.ra = role_asst_len
        self.src_count = 0
        self.tgt_count = 0
        self.next_pos = 0          # conversational append cursor
        self.asst_placed = False   # recompute / naive single role block
        self.need_turn_role = False

    def initial(self) -> list[tuple[int, int, str]]:
        out = [(t, i, Tag.PROMPT) for i, t in enumerate(self.prompt)]
        self.next_pos = len(self.prompt)
        if self.kind in (RECOMPUTE, NAIVE_REUSE):
            out += [(ROLE_USER_ID, len(self.prompt) + i, Tag.ROLE)
                    for i in range(self.ru)]
            self.next_pos += self.ru
        return out

    def read(self, tokens: Sequence[int]) -> list[tuple[int, int, str]]:
        out: list[tuple[int, int, str]] = []
        if self.kind == CONVERSATIONAL:
            for _ in range(self.ru):
                out.append((ROLE_USER_ID, self.next_pos, Tag.ROLE))
                self.next_pos += 1
            for t in tokens:
                out.append((t, self.next_pos, Tag.SOURCE))
                self.next_pos += 1
                self.src_count += 1
            self.need_turn_role = True
        else:  # recompute / naive-reuse: source block positions never shift
            base = len(self.prompt) + self.ru
            for t in tokens:
                out.append((t, base + self.src_count, Tag.SOURCE))
                self.src_count += 1
        return out

    def write_role(self) -> list[tuple[int, int, str]]:
        out: list[tuple[int, int, str]] = []
        if self.kind == CONVERSATIONAL:
            if self.need_turn_role:
                for _ in range(self.ra):
                    out.append((ROLE_ASST_ID, self.next_pos, Tag.ROLE))
                    self.next_pos += 1
                self.need_turn_role = False
        elif not self.asst_placed:
            base = len(self.prompt) + self.ru + self.src_count
            out = [(ROLE_ASST_ID, base + i, Tag.ROLE) for i in range(self.ra)]
            self.asst_placed = True
        return out

    def target_pos(self) -> int:
        if self.kind == CONVERSATIONAL:
            pos = self.next_pos
            self.next_pos += 1
        else:
            # position in the current ideal contiguous layout; for
            # naive-reuse earlier entries keep their stale positions
            pos = (len(self.prompt) + self.ru + self.src_count
                   + self.ra + self.tgt_count)
        self.tgt_count += 1
        return pos


class _GroupedPositions:
    def __init__(self, prompt: Sequence[int]):
        self.prompt = list(prompt)
        self.src_count = 0
        self.tgt_count = 0

    def initial(self) -> list[tuple[int, int, str]]:
        return [(t, i, Tag.PROMPT) for i, t in enumerate(self.prompt)]

    def read(self, tokens: Sequence[int]) -> list[tuple[int, int, str]]:
        base = len(self.prompt)
        out = []
        for t in tokens:
            out.append((t, base + self.src_count, Tag.SOURCE))
            self.src_count += 1
        return out

    def write_role(self) -> list[tuple[int, int, str]]:
        return []

    def target_pos(self) -> int:
        pos = self.tgt_count
        self.tgt_count += 1
        return pos


class StreamSession:
    """One source stream decoded against one model under one strategy."""

    def __init__(self, model: Transformer, strategy: Strategy,
                 policy: PolicySpec, source: Sequence[int],
                 prompt: Sequence[int] = (), role_user_len: int = 1,
                 role_asst_len: int = 1,
                 force_target_len: Optional[int] = None,
                 max_writes: Optional[int] = None,
                 flops_model: Optional[FlopsModel] = None):
        self.model = model
        self.strategy = strategy
        self.policy = policy
        self.source = list(source)
        self.prompt = list(prompt)
        self.role_user_len = role_user_len
        self.role_asst_len = role_asst_len
        self.force_target_len = force_target_len
        if force_target_len is not None:
            self.max_writes = force_target_len
        else:
            self.max_writes = (max_writes if max_writes is not None
                               else 4 * len(self.source) + 8)
        # FLOPs may be accounted against a different (larger) configuration
        # than the model actually executing the stream; the schedule is
        # identical, only the analytic coefficients change
        self.fm = flops_model or FlopsModel.from_config(model.config)
        self.cache: KvCache = model.new_cache()
        self.encoded: list[tuple[int, int, str]] = []
        self.pending: Optional[tuple[int, int, str]] = None
        self.predictor_logits: Optional[torch.Tensor] = None
        self.predictor_index: int = -1
        self.src_cursor = 0
        if strategy.kind == EXPOST:
            self.positions = _ExpostPositions(
                strategy, self.prompt, role_user_len, role_asst_len,
                model.config.max_position)
        elif strategy.kind == GROUPED:
            self.positions = _GroupedPositions(self.prompt)
        else:
            self.positions = _ContiguousPositions(
                strategy.kind, self.prompt, role_user_len, role_asst_len)
        self.trace = StreamTrace(
            strategy=strategy, policy=str(policy), source=self.source,
            prompt=self.prompt, role_user_len=role_user_len,
            role_asst_len=role_asst_len)

    # -- forward plumbing ---------------------------------------------------

    def _forward(self, entries: list[tuple[int, int, str]]) -> torch.Tensor:
        tokens = [e[0] for e in entries]
        positions = [e[1] for e in entries]
        tags = [e[2] for e in entries]
        mask = (stream_step_mask(self.cache.tags, tags)
                if self.strategy.kind == EXPOST else None)
        with torch.no_grad():
            logits, delta = self.model.forward(tokens, positions,
                                               cache=self.cache, mask=mask)
        self.cache.append(delta, tags=tags)
        self.encoded.extend(entries)
        return logits

    def _record(self, action: str, entries: list[tuple[int, int, str]],
                flops: float, cache_before: int, recompute: bool = False,
                emitted: Optional[int] = None,
                logits: Optional[np.ndarray] = None,
                context=None) -> None:
        self.trace.steps.append(StepRecord(
            action=action, tokens=[e[0] for e in entries],
            positions=[e[1] for e in entries], tags=[e[2] for e in entries],
            flops=flops, cache_before=cache_before,
            cache_after=len(self.cache), recompute=recompute,
            emitted=emitted, logits=logits, context=context))

    def _flush_entry(self) -> list[tuple[int, int, str]]:
        if self.pending is None:
            return []
        entry, self.pending = self.pending, None
        return [entry]

    # -- step handlers ------------------------------------------------------

    def init(self) -> None:
        entries = self.positions.initial()
        before = len(self.cache)
        flops = flops_forward(self.fm, before, len(entries))
        if entries:
            logits = self._forward(entries)
            self.predictor_logits = logits[-1]
            self.predictor_index = len(self.encoded) - 1
        self._record("INIT", entries, flops, before)

    def do_read(self, count: int) -> None:
        tokens = self.source[self.src_cursor:self.src_cursor + count]
        self.src_cursor += len(tokens)
        before = len(self.cache)
        if self.strategy.kind == RECOMPUTE:
            self._recompute_read(tokens, before)
            return
        entries = []
        flush = self._flush_entry() if self.strategy.kind == EXPOST else []
        entries += flush
        entries += self.positions.read(tokens)
        flops = flops_forward(self.fm, before, len(entries))
        logits = self._forward(entries)
        if flush:
            self.predictor_logits = logits[0]
            self.predictor_index = len(self.encoded) - len(entries)
        elif not self.trace.outputs:
            # nothing emitted yet: until a role block or target exists the
            # predictor is simply the newest encoded entry
            self.predictor_logits = logits[-1]
            self.predictor_index = len(self.encoded) - 1
        self._record("READ", entries, flops, before)

    def _recompute_read(self, tokens: Sequence[int], before: int) -> None:
        new_entries = self.positions.read(tokens)
        # absorb any pending target, then re-encode everything after the
        # fixed prompt at the fresh contiguous positions
        pend = self._flush_entry()
        old = self.encoded
        rest: list[tuple[int, int, str]] = []
        pos = len(self.prompt)
        for _ in range(self.role_user_len):
            rest.append((ROLE_USER_ID, pos, Tag.ROLE))
            pos += 1
        srcs = ([e[0] for e in old if e[2] == Tag.SOURCE]
                + [e[0] for e in new_entries])
        for tok in srcs:
            rest.append((tok, pos, Tag.SOURCE))
            pos += 1
        tgts = [e[0] for e in old if e[2] == Tag.TARGET] + [e[0] for e in pend]
        if tgts or self.positions.asst_placed:
            for _ in range(self.role_asst_len):
                rest.append((ROLE_ASST_ID, pos, Tag.ROLE))
                pos += 1
            self.positions.asst_placed = True
        for tok in tgts:
            rest.append((tok, pos, Tag.TARGET))
            pos += 1
        prompt_entries = [(t, i, Tag.PROMPT) for i, t in enumerate(self.prompt)]
        if self.strategy.recompute_from_scratch:
            self.cache = self.model.new_cache()
            self.encoded = []
            rest = prompt_entries + rest
        else:
            from .kv_cache import CacheMark
            self.cache.rollback(CacheMark(id(self.cache), len(self.prompt)))
            self.encoded = list(prompt_entries)
        flops = flops_forward(self.fm, len(self.cache), len(rest))
        logits = self._forward(rest)
        self.predictor_logits = logits[-1]
        self.predictor_index = len(self.encoded) - 1
        self._record("READ", rest, flops, before, recompute=True)

    def do_write(self, state: PolicyState) -> int:
        before = len(self.cache)
        entries = self._flush_entry()
        flush_len = len(entries)
        entries += self.positions.write_role()
        flops = flops_forward(self.fm, before, len(entries))
        if entries:
            logits = self._forward(entries)
            self.predictor_logits = logits[-1]
            self.predictor_index = len(self.encoded) - 1
        if self.predictor_logits is None:
            raise EngineError("nothing to predict from (empty context)")
        emit_logits = self.predictor_logits.detach().to(torch.float64).numpy().copy()
        token = int(np.argmax(emit_logits))
        pos = self.positions.target_pos()
        context = list(self.encoded[: self.predictor_index + 1])
        self._record("WRITE", [(token, pos, Tag.TARGET)], flops, before,
                     emitted=token, logits=emit_logits, context=context)
        self.trace.outputs.append(token)
        finishing = (self.force_target_len is None and token == EOS_ID)
        if not finishing:
            self.pending = (token, pos, Tag.TARGET)
        return token

    # -- main loop ----------------------------------------------------------

    def run(self) -> StreamTrace:
        self.init()
        state = PolicyState(src_remaining=len(self.source),
                            src_exhausted=len(self.source) == 0)
        writes = 0
        while True:
            action = next_action(self.policy, state)
            if action.kind == "FINISH":
                break
            if action.kind == "READ":
                count = min(action.count, len(self.source) - self.src_cursor)
                if count <= 0:
                    state = PolicyState(
                        src_read=state.src_read, src_remaining=0,
                        src_exhausted=True, tgt_emitted=state.tgt_emitted,
                        written_in_segment=state.written_in_segment,
                        last_emitted_is_eos=state.last_emitted_is_eos,
                        last_emitted_is_eoseg=state.last_emitted_is_eoseg)
                    continue
                self.do_read(count)
                remaining = len(self.source) - self.src_cursor
                state = PolicyState(
                    src_read=state.src_read + count, src_remaining=remaining,
                    src_exhausted=remaining == 0,
                    tgt_emitted=state.tgt_emitted, written_in_segment=0,
                    last_emitted_is_eos=False, last_emitted_is_eoseg=False)
                continue
            token = self.do_write(state)
            writes += 1
            suppress = self.force_target_len is not None
            state = PolicyState(
                src_read=state.src_read, src_remaining=state.src_remaining,
                src_exhausted=state.src_exhausted,
                tgt_emitted=state.tgt_emitted + 1,
                written_in_segment=state.written_in_segment + 1,
                last_emitted_is_eos=(token == EOS_ID and not suppress),
                last_emitted_is_eoseg=(token == EOSEG_ID and not suppress))
            if writes >= self.max_writes:
                self.trace.capped = self.force_target_len is None
                break
        self.trace.encoded = list(self.encoded)
        return self.trace


def run_stream(model: Transformer, source: Sequence[int], policy: PolicySpec,
               strategy: Strategy, prompt: Sequence[int] = (),
               role_user_len: int = 1, role_asst_len: int = 1,
               force_target_len: Optional[int] = None,
               max_writes: Optional[int] = None,
               flops_model: Optional[FlopsModel] = None) -> StreamTrace:
    """Decode one stream and return its trace."""
    session = StreamSession(model, strategy, policy, source, prompt,
                            role_user_len, role_asst_len,
                            force_target_len, max_writes, flops_model)
    return session.run()


def _fresh_contiguous(context: list[tuple[int, int, str]]
                      ) -> tuple[list[tuple[int, int, str]], int]:
    """Reorder a naive-reuse context into the consistent contiguous layout
    (prompt, user role, sources, assistant role, targets) with fresh
    positions; returns (entries, index of the original predictor entry)."""
    def group(entry: tuple[int, int, str]) -> int:
        tok, _, tag = entry
        if tag == Tag.PROMPT:
            return 0
        if tag == Tag.ROLE:
            return 1 if tok == ROLE_USER_ID else 3
        return 2 if tag == Tag.SOURCE else 4

    order = sorted(range(len(context)), key=lambda i: (group(context[i]), i))
    entries = [(context[i][0], pos, context[i][2])
               for pos, i in enumerate(order)]
    return entries, order.index(len(context) - 1)


def uncached_replay(model: Transformer, trace: StreamTrace) -> StreamTrace:
    """Re-derive each WRITE step's logits with one fresh full forward pass
    over the recorded context (no cache); returns a trace whose WRITE steps
    carry the replayed logits for comparison with the original.

    For NAIVE_REUSE traces the replay assigns fresh consistent positions (the
    recorded ones are stale by construction), so replay is expected to
    diverge from the original — that divergence is the demonstrated bug."""
    allow = trace.strategy.kind != EXPOST
    replay = StreamTrace(
        strategy=trace.strategy, policy=trace.policy, source=trace.source,
        prompt=trace.prompt, role_user_len=trace.role_user_len,
        role_asst_len=trace.role_asst_len, outputs=list(trace.outputs),
        encoded=list(trace.encoded), capped=trace.capped)
    for step in trace.steps:
        if step.action != "WRITE":
            replay.steps.append(step)
            continue
        if step.context is None or step.logits is None:
            raise EngineError("trace lacks replay context")
        context, pred_row = list(step.context), len(step.context) - 1
        if trace.strategy.kind == NAIVE_REUSE:
            context, pred_row = _fresh_contiguous(context)
        tokens = [e[0] for e in context]
        positions = [e[1] for e in context]
        tags = [e[2] for e in context]
        mask = stream_causal_mask(tags, source_sees_targets=allow)
        with torch.no_grad():
            logits, _ = model.forward(tokens, positions, mask=mask)
        fresh = logits[pred_row].to(torch.float64).numpy()
        replay.steps.append(StepRecord(
            action="WRITE", tokens=step.tokens, positions=step.positions,
            tags=step.tags, flops=step.flops,
            cache_before=step.cache_before, cache_after=step.cache_after,
            recompute=step.recompute, emitted=int(np.argmax(fresh)),
            logits=fresh, context=step.context))
    return replay


def compare_traces(a: StreamTrace, b: StreamTrace, tol: float = 1e-5) -> dict:
    """Stepwise comparison of emitted-token logits between two traces of the
    same stream. Unequal step structure yields a structural-mismatch report
    rather than an error."""
    wa, wb = a.write_steps(), b.write_steps()
    n = min(len(wa), len(wb))
    max_diff = 0.0
    first_divergence = None
    token_match = len(wa) == len(wb)
    for j in range(n):
        d = 0.0
        if wa[j].logits is not None and wb[j].logits is not None:
            k = min(len(wa[j].logits), len(wb[j].logits))
            d = float(np.max(np.abs(wa[j].logits[:k] - wb[j].logits[:k])))
            max_diff = max(max_diff, d)
        if wa[j].emitted != wb[j].emitted:
            token_match = False
        if first_divergence is None and (d > tol or wa[j].emitted != wb[j].emitted):
            first_divergence = j
    return {
        "writes_compared": n,
        "structural_mismatch": len(wa) != len(wb),
        "token_match": token_match,
        "first_divergence_step": first_divergence,
        "max_logit_diff": max_diff,
    }
