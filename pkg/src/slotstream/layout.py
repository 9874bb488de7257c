"""Explicit position-slot allocation and baseline layout generators.

The allocator reserves a contiguous block of L_slot position indices for
incoming source tokens; target positions start at slot_start + L_slot and
never move when later source tokens fill the slot. When a slot overflows, a
new user role block and a fresh slot are opened after the last materialized
position, so previously placed target positions stay invariant.

Baseline generators produce the contiguous recompute layout, the
role-interleaved conversational layout, and the grouped layout with
independent source/target position spaces.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

from .tokens import ROLE_ASST_ID, ROLE_USER_ID, Tag


class LayoutError(ValueError):
    pass


class PositionOverflowError(LayoutError):
    """A placement would exceed the position budget."""


@dataclass
class SlotState:
    index: int
    start_pos: int
    filled: int = 0

    def positions(self) -> range:
        return range(self.start_pos, self.start_pos + self.filled)


@dataclass(frozen=True)
class Placement:
    tag: str
    position: int


@dataclass
class LayoutEntry:
    token_id: int
    position_id: int
    tag: str


@dataclass
class LayoutPlan:
    entries: list[LayoutEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def positions(self, tag: Optional[str] = None) -> list[int]:
        return [e.position_id for e in self.entries if tag is None or e.tag == tag]

    def serialize(self) -> str:
        lines = [f"{i} {e.tag} {e.token_id} {e.position_id}"
                 for i, e in enumerate(self.entries)]
        return "\n".join(lines)

    @classmethod
    def parse(cls, text: str) -> "LayoutPlan":
        entries = []
        for line in text.strip().splitlines():
            _, tag, token, pos = line.split()
            if tag not in Tag.ALL:
                raise LayoutError(f"unknown tag {tag!r}")
            entries.append(LayoutEntry(int(token), int(pos), tag))
        return cls(entries)


class AllocationState:
    """Slot state machine. Owned by one streaming session; methods mutate.

    prompt_len positions are consumed by the fixed instruction prefix, then
    the first user role block, then slot 0. role blocks sit outside the
    L_slot budget. Set new_role_per_slot=False to open fresh slots without a
    role block (ablation path).
    """

    def __init__(self, L_slot: int, prompt_len: int = 0, role_user_len: int = 0,
                 role_asst_len: int = 0, max_position: Optional[int] = None,
                 new_role_per_slot: bool = True):
        if L_slot < 1:
            raise LayoutError("L_slot must be >= 1")
        if min(prompt_len, role_user_len, role_asst_len) < 0:
            raise LayoutError("prompt/role lengths must be >= 0")
        self.L_slot = L_slot
        self.prompt_len = prompt_len
        self.role_user_len = role_user_len
        self.role_asst_len = role_asst_len
        self.max_position = max_position
        self.new_role_per_slot = new_role_per_slot
        self.slots: list[SlotState] = [SlotState(0, prompt_len + role_user_len)]
        self.last_target_end: Optional[int] = None
        # highest materialized position (prompt/role/source/target)
        self._max_placed = prompt_len + role_user_len - 1
        self._asst_placed = False
        self._check_budget(self._max_placed)

    def _check_budget(self, pos: int) -> None:
        if self.max_position is not None and pos >= self.max_position:
            raise PositionOverflowError(
                f"position {pos} exceeds budget {self.max_position}")

    def initial_placements(self) -> list[Placement]:
        """Prompt prefix and the first user role block."""
        out = [Placement(Tag.PROMPT, p) for p in range(self.prompt_len)]
        out += [Placement(Tag.ROLE, self.prompt_len + i)
                for i in range(self.role_user_len)]
        return out

    @property
    def next_free_pos(self) -> int:
        return self._max_placed + 1

    def place_source(self, n_tokens: int) -> list[Placement]:
        """Fill the current slot; overflow opens role block + new slot."""
        if n_tokens < 1:
            raise LayoutError("n_tokens must be >= 1")
        out: list[Placement] = []
        for _ in range(n_tokens):
            slot = self.slots[-1]
            if slot.filled >= self.L_slot:
                base = self._max_placed + 1
                if self.new_role_per_slot:
                    for i in range(self.role_user_len):
                        self._check_budget(base + i)
                        out.append(Placement(Tag.ROLE, base + i))
                    if self.role_user_len:
                        self._max_placed = base + self.role_user_len - 1
                    start = base + self.role_user_len
                else:
                    start = base
                slot = SlotState(len(self.slots), start)
                self.slots.append(slot)
                self._asst_placed = False
            pos = slot.start_pos + slot.filled
            self._check_budget(pos)
            slot.filled += 1
            out.append(Placement(Tag.SOURCE, pos))
            self._max_placed = max(self._max_placed, pos)
        return out

    def target_start(self) -> int:
        """Start of the target segment for the current slot: start + L_slot."""
        return self.slots[-1].start_pos + self.L_slot

    def place_asst_role(self) -> list[Placement]:
        """Assistant role block for the current slot phase; empty if already
        placed (or role_asst_len is zero)."""
        out: list[Placement] = []
        if not self._asst_placed:
            ts = self.target_start()
            for i in range(self.role_asst_len):
                self._check_budget(ts + i)
                out.append(Placement(Tag.ROLE, ts + i))
            if self.role_asst_len:
                self._max_placed = max(self._max_placed, ts + self.role_asst_len - 1)
            self._asst_placed = True
        return out

    def place_target(self, n_tokens: int) -> list[Placement]:
        """Assistant role block (once per slot phase), then consecutive
        target content positions."""
        if n_tokens < 1:
            raise LayoutError("n_tokens must be >= 1")
        out: list[Placement] = self.place_asst_role()
        start = self.target_start() + self.role_asst_len
        if self.last_target_end is not None:
            start = max(start, self.last_target_end + 1)
        for i in range(n_tokens):
            self._check_budget(start + i)
            out.append(Placement(Tag.TARGET, start + i))
        self.last_target_end = start + n_tokens - 1
        self._max_placed = max(self._max_placed, self.last_target_end)
        return out


def new_allocation(L_slot: int, prompt_len: int = 0, role_user_len: int = 0,
                   role_asst_len: int = 0, **kwargs) -> AllocationState:
    return AllocationState(L_slot, prompt_len, role_user_len, role_asst_len, **kwargs)


def _role_entries(role_id: int, length: int, start_pos: int) -> list[LayoutEntry]:
    return [LayoutEntry(role_id, start_pos + i, Tag.ROLE) for i in range(length)]


def layout_recompute(source_prefix: Sequence[int], target_prefix: Sequence[int],
                     role_user_len: int = 0, role_asst_len: int = 0,
                     prompt_tokens: Sequence[int] = ()) -> LayoutPlan:
    """Contiguous positions 0..N-1: prompt, user role, all source, assistant
    role, all target. Inserting a source token shifts every later position."""
    entries: list[LayoutEntry] = []
    pos = 0
    for t in prompt_tokens:
        entries.append(LayoutEntry(t, pos, Tag.PROMPT))
        pos += 1
    entries += _role_entries(ROLE_USER_ID, role_user_len, pos)
    pos += role_user_len
    for t in source_prefix:
        entries.append(LayoutEntry(t, pos, Tag.SOURCE))
        pos += 1
    entries += _role_entries(ROLE_ASST_ID, role_asst_len, pos)
    pos += role_asst_len
    for t in target_prefix:
        entries.append(LayoutEntry(t, pos, Tag.TARGET))
        pos += 1
    return LayoutPlan(entries)


def layout_conversational(chunks: Sequence[tuple[str, Sequence[int]]],
                          role_user_len: int = 0, role_asst_len: int = 0,
                          prompt_tokens: Sequence[int] = ()) -> LayoutPlan:
    """Alternating source/target chunks, each preceded by its role block;
    positions contiguous and strictly append-only across chunk additions."""
    entries: list[LayoutEntry] = []
    pos = 0
    for t in prompt_tokens:
        entries.append(LayoutEntry(t, pos, Tag.PROMPT))
        pos += 1
    prev_kind = None
    for kind, tokens in chunks:
        if kind not in ("source", "target"):
            raise LayoutError(f"unknown chunk kind {kind!r}")
        if prev_kind is not None and kind == prev_kind:
            raise LayoutError("chunks must alternate source/target")
        prev_kind = kind
        if kind == "source":
            entries += _role_entries(ROLE_USER_ID, role_user_len, pos)
            pos += role_user_len
            tag = Tag.SOURCE
        else:
            entries += _role_entries(ROLE_ASST_ID, role_asst_len, pos)
            pos += role_asst_len
            tag = Tag.TARGET
        for t in tokens:
            entries.append(LayoutEntry(t, pos, tag))
            pos += 1
    return LayoutPlan(entries)


def layout_grouped(source_prefix: Sequence[int],
                   target_prefix: Sequence[int]) -> LayoutPlan:
    """Independent position spaces: source 0..|S|-1 and target 0..|T|-1.
    Overlapping position IDs across the two groups are intentional."""
    entries = [LayoutEntry(t, i, Tag.SOURCE) for i, t in enumerate(source_prefix)]
    entries += [LayoutEntry(t, j, Tag.TARGET) for j, t in enumerate(target_prefix)]
    return LayoutPlan(entries)
