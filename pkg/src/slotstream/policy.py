"""Read/write scheduling: wait-k and read-n & incremental decoding.

g(j) is the number of source tokens read before the j-th target token is
emitted; it is monotone non-decreasing and bounded by |S| for every policy.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

WAIT_K = "wait-k"
READ_N = "read-n"

DEFAULT_WRITE_CAP = 16


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class PolicySpec:
    kind: str
    k: int = 1
    n: int = 1
    write_cap: int = DEFAULT_WRITE_CAP

    def __post_init__(self) -> None:
        if self.kind not in (WAIT_K, READ_N):
            raise PolicyError(f"unknown policy kind {self.kind!r}")
        if self.kind == WAIT_K and self.k < 1:
            raise PolicyError("k must be >= 1")
        if self.kind == READ_N and (self.n < 1 or self.write_cap < 1):
            raise PolicyError("n and write_cap must be >= 1")

    @classmethod
    def parse(cls, text: str) -> "PolicySpec":
        """CLI syntax: 'wait-k:K' or 'read-n:N[,cap]'."""
        try:
            kind, _, rest = text.partition(":")
            if kind == WAIT_K:
                return cls(kind=WAIT_K, k=int(rest))
            if kind == READ_N:
                parts = rest.split(",")
                cap = int(parts[1]) if len(parts) > 1 else DEFAULT_WRITE_CAP
                return cls(kind=READ_N, n=int(parts[0]), write_cap=cap)
        except (ValueError, IndexError) as exc:
            raise PolicyError(f"bad policy spec {text!r}") from exc
        raise PolicyError(f"bad policy spec {text!r}")

    def __str__(self) -> str:
        if self.kind == WAIT_K:
            return f"wait-k:{self.k}"
        return f"read-n:{self.n},{self.write_cap}"


@dataclass(frozen=True)
class Action:
    kind: str  # READ | WRITE | FINISH
    count: int = 0

    def __post_init__(self) -> None:
        if self.kind == "READ" and self.count < 1:
            raise PolicyError("READ count must be >= 1")


READ = lambda count: Action("READ", count)  # noqa: E731
WRITE = Action("WRITE")
FINISH = Action("FINISH")


@dataclass(frozen=True)
class PolicyState:
    src_read: int = 0
    src_remaining: Optional[int] = None
    src_exhausted: bool = False
    tgt_emitted: int = 0
    written_in_segment: int = 0
    last_emitted_is_eos: bool = False
    last_emitted_is_eoseg: bool = False


def waitk_g(j: int, k: int, src_len: int) -> int:
    """Delay of the j-th target token under wait-k: min(k + j - 1, |S|)."""
    if j < 1 or k < 1 or src_len < 1:
        raise PolicyError("j, k and src_len must be >= 1")
    return min(k + j - 1, src_len)


def next_action(spec: PolicySpec, state: PolicyState) -> Action:
    """Pure scheduler step. FINISH is absorbing."""
    if state.last_emitted_is_eos:
        return FINISH
    if spec.kind == WAIT_K:
        if state.src_exhausted and state.src_read == 0:
            return FINISH
        needed = spec.k + state.tgt_emitted  # reads required before target j+1
        if state.src_read >= needed or state.src_exhausted:
            return WRITE
        return READ(1)
    # READ_N: read n (clamped), then write until end-of-segment or cap
    if state.src_read == 0:
        if state.src_exhausted:
            return FINISH
        return READ(min(spec.n, state.src_remaining)
                    if state.src_remaining is not None else spec.n)
    segment_done = (state.last_emitted_is_eoseg
                    or state.written_in_segment >= spec.write_cap)
    if not segment_done:
        return WRITE
    if state.src_exhausted:
        return WRITE  # keep writing until the end-of-sequence token
    count = (spec.n if state.src_remaining is None
             else min(spec.n, state.src_remaining))
    return READ(count)


def delays_from_trace(trace) -> list[int]:
    """g(j) per emitted target token, extracted from a stream trace."""
    delays = []
    src_read = 0
    for step in trace.steps:
        if step.action == "READ":
            n_src = sum(1 for t in step.tags if t == "SOURCE")
            if getattr(step, "recompute", False):
                # rebuild steps re-encode every source read so far
                src_read = n_src
            else:
                src_read += n_src
        elif step.action == "WRITE":
            delays.append(src_read)
    for a, b in zip(delays, delays[1:]):
        if b < a:
            raise PolicyError("non-monotone delay sequence extracted from trace")
    return delays
