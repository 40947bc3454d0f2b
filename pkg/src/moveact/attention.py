"""Attention recording and editing-branch key/value injection.

Cross-attention maps are recorded post-softmax (rows sum to 1); self-attention
keys and values captured during the inversion branch are cached per
(scheduler timestep, layer, guidance branch) and queried by the editing
branch at the identical timestep.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, Sequence, Tuple

import numpy as np
import torch

from .backbone.base import GUIDANCE_BRANCHES
from .config import EditConfig

KV_MAGIC = b"MAKV"
KV_VERSION = 1


class AttentionError(RuntimeError):
    pass


class CacheMissError(AttentionError):
    """No cached entry at (timestep, layer, branch): schedule mismatch."""


class FrozenCacheError(AttentionError):
    pass


def attention_output(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(q k^T / sqrt(d)) v over (heads, positions, head_dim) tensors."""
    d = q.shape[-1]
    sim = torch.einsum("hid,hjd->hij", q, k) / (d ** 0.5)
    return torch.einsum("hij,hjd->hid", sim.softmax(dim=-1), v)


@dataclass
class AttentionRecord:
    """Per-call instrumentation payload.

    cross_maps: (layer_id, head) -> post-softmax map of shape (positions, tokens).
    self_kv: layer_id -> (K, V), each (heads, positions, head_dim).
    """

    cross_maps: Dict[Tuple[str, int], torch.Tensor] = field(default_factory=dict)
    self_kv: Dict[str, Tuple[torch.Tensor, torch.Tensor]] = field(default_factory=dict)

    def add_cross_map(self, layer_id: str, maps: torch.Tensor) -> None:
        """Store one layer's post-softmax maps, given as (heads, positions, tokens)."""
        for h in range(maps.shape[0]):
            self.cross_maps[(layer_id, h)] = maps[h]

    def cross_layers(self) -> Tuple[str, ...]:
        return tuple(sorted({layer for layer, _ in self.cross_maps}))


@dataclass
class TokenHeatmap:
    """Aggregated per-token attention over one spatial grid.

    `data` is min-max normalized to [0,1] (all zeros when `raw` is constant)
    and detached; `raw` keeps the autograd graph for the infusion losses.
    """

    data: np.ndarray
    raw: torch.Tensor
    resolution: Tuple[int, int]


def aggregate_token_map(
    record: AttentionRecord,
    token_indices: Sequence[int],
    resolution: Tuple[int, int],
) -> TokenHeatmap:
    """Mean over layers, heads and token indices at one resolution, then min-max normalize."""
    if len(token_indices) == 0:
        raise AttentionError("token_indices must be nonempty")
    h, w = resolution
    positions = h * w
    per_head = [m for m in record.cross_maps.values() if m.shape[0] == positions]
    if not per_head:
        raise AttentionError(f"no recorded cross-attention layer at resolution {resolution}")
    idx = torch.as_tensor(list(token_indices), dtype=torch.long)
    stacked = torch.stack([m.index_select(1, idx).mean(dim=1) for m in per_head])
    raw = stacked.mean(dim=0).reshape(h, w)
    with torch.no_grad():
        lo, hi = raw.min(), raw.max()
        if (hi - lo).item() == 0.0:
            data = torch.zeros_like(raw)
        else:
            data = (raw - lo) / (hi - lo)
    return TokenHeatmap(data=data.detach().cpu().numpy(), raw=raw, resolution=(h, w))


@dataclass
class KVCache:
    """Inversion-branch K/V store keyed by (scheduler timestep, layer, branch)."""

    entries: Dict[Tuple[int, str, str], Tuple[torch.Tensor, torch.Tensor]] = field(default_factory=dict)
    frozen: bool = False
    source_branch: str = "inversion"

    def insert(self, timestep: int, layer_id: str, branch: str, k: torch.Tensor, v: torch.Tensor) -> None:
        if self.frozen:
            raise FrozenCacheError("cache is frozen after the inversion branch completes")
        if branch not in GUIDANCE_BRANCHES:
            raise AttentionError(f"unknown guidance branch {branch!r}")
        key = (int(timestep), layer_id, branch)
        if key in self.entries:
            raise AttentionError(f"duplicate cache insertion at {key}")
        self.entries[key] = (k.detach().clone(), v.detach().clone())

    def get(self, timestep: int, layer_id: str, branch: str) -> Tuple[torch.Tensor, torch.Tensor]:
        key = (int(timestep), layer_id, branch)
        if key not in self.entries:
            raise CacheMissError(
                f"no cached K/V at timestep={timestep} layer={layer_id!r} branch={branch!r}; "
                "inversion and editing schedules do not align"
            )
        return self.entries[key]

    def freeze(self) -> None:
        self.frozen = True

    def timesteps(self) -> Tuple[int, ...]:
        return tuple(sorted({t for t, _, _ in self.entries}))

    def layers(self) -> Tuple[str, ...]:
        return tuple(sorted({l for _, l, _ in self.entries}))


def record_inversion_kv(record: AttentionRecord, timestep: int, branch: str, cache: KVCache) -> KVCache:
    """Insert every self-attention (K, V) pair of `record` under (timestep, branch)."""
    for layer_id, (k, v) in record.self_kv.items():
        cache.insert(timestep, layer_id, branch, k, v)
    return cache


def kv_replacement_policy(reverse_step_index: int, layer_id: str, config: EditConfig,
                          layer_set: Iterable[str]) -> bool:
    """True iff this (reverse step, layer) pair gets inversion K/V injected.

    Strict comparison: the first replaced step is S + 1 (steps are 1-based).
    """
    if reverse_step_index < 1:
        raise AttentionError(f"reverse_step_index must be >= 1, got {reverse_step_index}")
    return reverse_step_index > config.S and layer_id in set(layer_set)


def apply_kv_replacement(
    query: torch.Tensor,
    cache: KVCache,
    timestep: int,
    layer_id: str,
    branch: str,
) -> torch.Tensor:
    """attention(Q, K_inv, V_inv) with the cached pair; raises CacheMissError on a miss."""
    k, v = cache.get(timestep, layer_id, branch)
    if query.shape[-1] != k.shape[-1]:
        raise AttentionError(
            f"query head dim {query.shape[-1]} does not match cached key dim {k.shape[-1]}"
        )
    return attention_output(query, k, v)


# ---------------------------------------------------------------------------
# KV cache serialization: magic, version byte, JSON index, raw float64 blobs.

def save_kv_cache(cache: KVCache, path) -> None:
    index = []
    blobs = []
    offset = 0
    for (t, layer, branch), (k, v) in sorted(cache.entries.items()):
        k_np = k.detach().cpu().numpy().astype(np.float64)
        v_np = v.detach().cpu().numpy().astype(np.float64)
        entry = {
            "timestep": t,
            "layer": layer,
            "branch": branch,
            "k_shape": list(k_np.shape),
            "v_shape": list(v_np.shape),
            "offset": offset,
        }
        kb, vb = k_np.tobytes(), v_np.tobytes()
        offset += len(kb) + len(vb)
        index.append(entry)
        blobs.append(kb)
        blobs.append(vb)
    header = json.dumps({"entries": index, "frozen": cache.frozen}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(KV_MAGIC)
        fh.write(struct.pack("B", KV_VERSION))
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_kv_cache(path) -> KVCache:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != KV_MAGIC:
            raise AttentionError(f"not a KV cache file (magic {magic!r})")
        (version,) = struct.unpack("B", fh.read(1))
        if version != KV_VERSION:
            raise AttentionError(f"unsupported KV cache version {version}")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        data = fh.read()
    cache = KVCache()
    for entry in header["entries"]:
        k_shape = tuple(entry["k_shape"])
        v_shape = tuple(entry["v_shape"])
        start = entry["offset"]
        k_len = 8 * int(np.prod(k_shape))
        v_len = 8 * int(np.prod(v_shape))
        k = np.frombuffer(data[start : start + k_len], dtype=np.float64).reshape(k_shape)
        v = np.frombuffer(data[start + k_len : start + k_len + v_len], dtype=np.float64).reshape(v_shape)
        cache.insert(entry["timestep"], entry["layer"], entry["branch"],
                     torch.from_numpy(k.copy()), torch.from_numpy(v.copy()))
    if header.get("frozen"):
        cache.freeze()
    return cache
