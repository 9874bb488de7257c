"""Policy-consistent attention masks for training-style forward passes.

The mask reproduces, inside one full-sequence forward, exactly what each
entry could see when it was encoded during streaming:

  * PROMPT rows see earlier prompt entries.
  * user ROLE rows see everything encoded before the slot they open.
  * SOURCE row i sees prompt, roles opened before s_i was read, and earlier
    source tokens; never targets (flip source_sees_targets to allow it).
  * TARGET row j sees prompt, roles opened by its emission step, source
    tokens i <= g(j), and targets < j.
  * PAD rows and columns are fully invisible.

Visibility never rises above the causal diagonal in encode order, and for a
fixed source column the set of target rows that see it is a suffix of the
target index range.

Two independent implementations are provided: build_policy_mask derives
encode-order keys arithmetically from g, while the oracle replays the
stream step by step. Differential tests hold them against each other.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .layout import LayoutPlan
from .tokens import Tag


class MaskError(ValueError):
    pass


def _role_run_kinds(layout: LayoutPlan) -> list[Optional[str]]:
    """Classify each ROLE entry as 'user' or 'asst' by the next content tag."""
    n = len(layout.entries)
    kinds: list[Optional[str]] = [None] * n
    for idx, e in enumerate(layout.entries):
        if e.tag != Tag.ROLE:
            continue
        kind = "asst"  # trailing role block belongs to the target side
        for later in layout.entries[idx + 1:]:
            if later.tag == Tag.SOURCE:
                kind = "user"
                break
            if later.tag == Tag.TARGET:
                kind = "asst"
                break
            if later.tag == Tag.ROLE or later.tag == Tag.PAD:
                continue
        kinds[idx] = kind
    return kinds


def _encode_keys(layout: LayoutPlan, g: Sequence[int]) -> list[Optional[tuple]]:
    """Sort key per entry giving the temporal encode order; None for PAD.

    writes_before(i) counts targets emitted before source i is read:
    #{j : g(j) < i}. Keys are (writes_done, lane, ordinal) with targets in
    lane 0 and sources in lane 1, so s_i precedes t_j exactly when
    writes_before(i) < j, i.e. when i <= g(j).
    """
    entries = layout.entries
    n_src = sum(1 for e in entries if e.tag == Tag.SOURCE)
    n_tgt = sum(1 for e in entries if e.tag == Tag.TARGET)
    if len(g) < n_tgt:
        raise MaskError(f"g has {len(g)} delays for {n_tgt} target tokens")
    g = list(g[:n_tgt])

    def writes_before(i: int) -> int:
        return sum(1 for d in g if d < i)

    kinds = _role_run_kinds(layout)
    keys: list[Optional[tuple]] = [None] * len(entries)
    src_i = 0
    tgt_j = 0
    # next source index each user-role run opens; next target each asst run
    for idx, e in enumerate(entries):
        if e.tag == Tag.PROMPT:
            keys[idx] = (-1.0, 0.0, float(idx))
        elif e.tag == Tag.SOURCE:
            src_i += 1
            keys[idx] = (float(writes_before(src_i)), 1.0, float(src_i))
        elif e.tag == Tag.TARGET:
            tgt_j += 1
            keys[idx] = (float(tgt_j), 0.0, float(tgt_j))
        elif e.tag == Tag.PAD:
            keys[idx] = None
        else:  # ROLE: anchored just before the next content entry
            nxt_src, nxt_tgt = src_i + 1, tgt_j + 1
            if kinds[idx] == "user":
                if nxt_src > n_src:
                    keys[idx] = (math.inf, 1.0, float(idx))
                else:
                    keys[idx] = (float(writes_before(nxt_src)), 1.0,
                                 nxt_src - 0.5 + idx * 1e-9)
            else:
                if nxt_tgt > n_tgt:
                    keys[idx] = (math.inf, 0.0, float(idx))
                else:
                    keys[idx] = (float(nxt_tgt), 0.0, -0.5 + idx * 1e-9)
    return keys


def build_policy_mask(layout: LayoutPlan, g: Sequence[int],
                      source_sees_targets: bool = False) -> np.ndarray:
    """Boolean visibility matrix [n, n] over the layout for delay sequence g."""
    entries = layout.entries
    n = len(entries)
    keys = _encode_keys(layout, g)
    mask = np.zeros((n, n), dtype=bool)
    for r in range(n):
        if keys[r] is None:
            continue
        for c in range(n):
            if keys[c] is None:
                continue
            if c == r:
                mask[r, c] = True
                continue
            if keys[c] >= keys[r]:
                continue
            if (not source_sees_targets and entries[r].tag == Tag.SOURCE
                    and entries[c].tag == Tag.TARGET):
                continue
            mask[r, c] = True
    return mask


def _oracle_encode_order(layout: LayoutPlan, g: Sequence[int]) -> list[int]:
    """Replay the stream and return entry indices in encode order.

    Independent restatement used for differential testing: two cursors walk
    the source side (PROMPT/ROLE-user/SOURCE/PAD) and the target side
    (ROLE-asst/TARGET) of the layout, interleaved per the delays in g.
    """
    entries = layout.entries
    kinds = _role_run_kinds(layout)
    source_side = [i for i, e in enumerate(entries)
                   if e.tag in (Tag.PROMPT, Tag.SOURCE, Tag.PAD)
                   or (e.tag == Tag.ROLE and kinds[i] == "user")]
    target_side = [i for i, e in enumerate(entries)
                   if e.tag == Tag.TARGET
                   or (e.tag == Tag.ROLE and kinds[i] == "asst")]
    n_tgt = sum(1 for e in entries if e.tag == Tag.TARGET)
    if len(g) < n_tgt:
        raise MaskError(f"g has {len(g)} delays for {n_tgt} target tokens")

    order: list[int] = []
    sp = 0  # source-side cursor
    src_read = 0

    def read_sources_until(count: int) -> None:
        nonlocal sp, src_read
        while src_read < count and sp < len(source_side):
            idx = source_side[sp]
            sp += 1
            tag = entries[idx].tag
            if tag == Tag.PAD:
                continue
            order.append(idx)
            if tag == Tag.SOURCE:
                src_read += 1

    # prompt (and any role block directly in front of the first source) is
    # encoded when the first source arrives; emit leading prompt now so
    # prompt-only layouts still encode it
    while sp < len(source_side) and entries[source_side[sp]].tag == Tag.PROMPT:
        order.append(source_side[sp])
        sp += 1

    tj = 0
    for tp in range(len(target_side)):
        idx = target_side[tp]
        if entries[idx].tag == Tag.TARGET:
            tj += 1
            read_sources_until(g[tj - 1])
            order.append(idx)
        else:
            # assistant role block: encoded with the next target's step
            nxt = next((t for t in target_side[tp:]
                        if entries[t].tag == Tag.TARGET), None)
            if nxt is not None:
                read_sources_until(g[tj])  # tj is 0-based count so far
            else:
                read_sources_until(10 ** 9)  # trailing role block comes last
            order.append(idx)
    read_sources_until(10 ** 9)  # drain remaining sources
    return order


def visibility_oracle(layout: LayoutPlan, g: Sequence[int], row: int, col: int,
                      source_sees_targets: bool = False) -> bool:
    """Entry-by-entry visibility, recomputed from a stream replay."""
    n = len(layout.entries)
    if not (0 <= row < n and 0 <= col < n):
        raise MaskError("row/col out of range")
    return bool(oracle_mask(layout, g, source_sees_targets)[row, col])


def oracle_mask(layout: LayoutPlan, g: Sequence[int],
                source_sees_targets: bool = False) -> np.ndarray:
    entries = layout.entries
    order = _oracle_encode_order(layout, g)
    rank = {idx: t for t, idx in enumerate(order)}
    n = len(entries)
    mask = np.zeros((n, n), dtype=bool)
    for r in range(n):
        if r not in rank:
            continue
        for c in range(n):
            if c not in rank:
                continue
            if r == c:
                mask[r, c] = True
            elif rank[c] < rank[r]:
                if (not source_sees_targets and entries[r].tag == Tag.SOURCE
                        and entries[c].tag == Tag.TARGET):
                    continue
                mask[r, c] = True
    return mask


def mask_to_text(mask: np.ndarray) -> str:
    """0/1 grid block for golden tests."""
    return "\n".join("".join("1" if v else "0" for v in row) for row in mask)
