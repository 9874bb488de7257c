"""Per-layer KV storage annotated with the position ID each entry was encoded at.

Entries are append-only during a stream; snapshot/rollback supports the
retraction needed by read-n incremental decoding. Backing tensors grow by
amortized doubling and are never evicted.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch

from .tokens import Tag


class CacheError(ValueError):
    pass


@dataclass
class CacheDelta:
    """New entries produced by one forward call.

    keys/values: one tensor per layer, shape [m, n_heads, head_dim]. For the
    rotary scheme keys are already rotated to their position IDs; for
    alibi/none they are raw and the bias is applied at score time from the
    stored positions.
    """

    keys: list[torch.Tensor]
    values: list[torch.Tensor]
    position_ids: list[int]
    tags: Optional[list[str]] = None

    def __len__(self) -> int:
        return len(self.position_ids)


@dataclass(frozen=True)
class CacheMark:
    cache_id: int
    length: int


class KvCache:
    def __init__(self, n_layers: int, n_heads: int, head_dim: int,
                 dtype: torch.dtype = torch.float32):
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.head_dim = head_dim
        self.dtype = dtype
        self._len = 0
        self._cap = 8
        self._keys = [torch.zeros(self._cap, n_heads, head_dim, dtype=dtype)
                      for _ in range(n_layers)]
        self._values = [torch.zeros(self._cap, n_heads, head_dim, dtype=dtype)
                        for _ in range(n_layers)]
        self.position_ids: list[int] = []
        self.tags: list[str] = []

    def __len__(self) -> int:
        return self._len

    def keys(self, layer: int) -> torch.Tensor:
        return self._keys[layer][: self._len]

    def values(self, layer: int) -> torch.Tensor:
        return self._values[layer][: self._len]

    def _grow(self, needed: int) -> None:
        if needed <= self._cap:
            return
        cap = self._cap
        while cap < needed:
            cap *= 2
        for store in (self._keys, self._values):
            for i, buf in enumerate(store):
                new = torch.zeros(cap, self.n_heads, self.head_dim, dtype=self.dtype)
                new[: self._len] = buf[: self._len]
                store[i] = new
        self._cap = cap

    def append(self, delta: CacheDelta, tags: Optional[Sequence[str]] = None) -> "KvCache":
        if len(delta.keys) != self.n_layers or len(delta.values) != self.n_layers:
            raise CacheError(
                f"delta has {len(delta.keys)} layers, cache has {self.n_layers}")
        m = len(delta)
        if m == 0:
            return self
        tags = list(tags) if tags is not None else delta.tags
        if tags is None:
            raise CacheError("append requires entry tags (delta.tags or tags=)")
        if len(tags) != m:
            raise CacheError("tag count does not match delta length")
        self._grow(self._len + m)
        for layer in range(self.n_layers):
            self._keys[layer][self._len:self._len + m] = delta.keys[layer].to(self.dtype)
            self._values[layer][self._len:self._len + m] = delta.values[layer].to(self.dtype)
        self.position_ids.extend(int(p) for p in delta.position_ids)
        self.tags.extend(tags)
        self._len += m
        return self

    def snapshot(self) -> CacheMark:
        return CacheMark(cache_id=id(self), length=self._len)

    def rollback(self, mark: CacheMark) -> "KvCache":
        if mark.cache_id != id(self):
            raise CacheError("mark was taken from a different cache")
        if mark.length > self._len:
            raise CacheError(f"stale mark: length {mark.length} > current {self._len}")
        self._len = mark.length
        del self.position_ids[mark.length:]
        del self.tags[mark.length:]
        return self

    def check_consistent(self) -> None:
        """Cross-layer consistency: counts, positions and tags are shared."""
        assert len(self.position_ids) == self._len
        assert len(self.tags) == self._len
        for layer in range(self.n_layers):
            assert self._keys[layer].shape[0] >= self._len
            assert self._values[layer].shape[0] >= self._len
        assert all(t in Tag.ALL for t in self.tags)

    def dump(self) -> str:
        """Textual table (index, tag, position_id, per-layer key norm)."""
        header = "index tag position " + " ".join(
            f"knorm{l}" for l in range(self.n_layers))
        lines = [header]
        for i in range(self._len):
            norms = " ".join(
                f"{torch.linalg.vector_norm(self._keys[l][i]).item():.6g}"
                for l in range(self.n_layers))
            lines.append(f"{i} {self.tags[i]} {self.position_ids[i]} {norms}")
        return "\n".join(lines)


def recompute_from(model, entries, mask=None, flop_counter=None) -> KvCache:
    """Rebuild a cache with one fresh forward pass over a complete layout.

    entries: sequence of (token_id, position_id, tag). The default mask is
    causal in entry order with PAD rows/columns excluded; pass an explicit
    mask for layouts whose visibility differs (e.g. streaming-order replays).
    """
    cache = KvCache(model.config.n_layers, model.config.n_heads,
                    model.config.head_dim, dtype=model.dtype)
    if not entries:
        return cache
    tokens = [e[0] for e in entries]
    positions = [e[1] for e in entries]
    tags = [e[2] for e in entries]
    if mask is None:
        mask = default_layout_mask(tags)
    _, delta = model.forward(tokens, positions, cache=None, mask=mask,
                             flop_counter=flop_counter)
    delta.tags = tags
    cache.append(delta)
    return cache


def default_layout_mask(tags: Sequence[str]) -> torch.Tensor:
    """Causal-in-order visibility with PAD excluded in both directions."""
    n = len(tags)
    mask = torch.zeros(n, n, dtype=torch.bool)
    for r in range(n):
        if tags[r] == Tag.PAD:
            continue
        for c in range(r + 1):
            if tags[c] == Tag.PAD:
                continue
            mask[r, c] = True
    return mask
