"""Structured sparsity fixed at initialization, plus the compaction
transforms that turn sparse weight matrices into dense crossbar payloads.

Three mask styles are supported on a layer's unrolled weight matrix
(rows = fan-in, columns = output units):

* channel/filter ("cf"): whole columns of layer l and the matching
  row groups of layer l+1;
* crossbar-column segments ("xcs"): tile-aligned length-n runs within
  single columns;
* crossbar-row segments ("xrs"): tile-aligned length-n runs within
  single rows.

Mask generators take any object exposing ``unrolled_layers()`` that
yields per-layer records with ``name``, ``rows``, ``cols``,
``rows_per_channel`` and ``in_channels`` fields (see nn.ModelSpec).
Selection is uniform at random: the weights do not exist yet when the
mask is fixed, so magnitude ranking would be meaningless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

METHODS = ("cf", "xcs", "xrs")


@dataclass
class SparsityPattern:
    """Pruning method, ratio and the per-layer binary masks it induces."""

    method: str
    s: float
    seed: int
    n: int | None                     # tile size, xcs/xrs only
    masks: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown pruning method {self.method!r}")
        if not 0 <= self.s < 1:
            raise ValueError(f"sparsity ratio must be in [0, 1), got {self.s}")


@dataclass
class CfCompaction:
    """Rows/columns surviving C/F pruning for one layer; exactly invertible."""

    orig_shape: tuple[int, int]
    kept_rows: np.ndarray
    kept_cols: np.ndarray

    def apply(self, w: np.ndarray) -> np.ndarray:
        if w.shape != self.orig_shape:
            raise ValueError(f"matrix shape {w.shape} does not match descriptor "
                             f"{self.orig_shape}")
        return w[np.ix_(self.kept_rows, self.kept_cols)]

    def invert(self, compacted: np.ndarray) -> np.ndarray:
        out = np.zeros(self.orig_shape, dtype=compacted.dtype)
        out[np.ix_(self.kept_rows, self.kept_cols)] = compacted
        return out


@dataclass
class SegmentPacking:
    """Placement of surviving XCS/XRS segments into dense crossbar tiles.

    ``tiles`` holds one (block_r, block_c, row_indices, col_indices) tuple
    per packed tile, with indices referring to the original matrix, so the
    scatter back is the exact inverse transform.
    """

    kind: str                         # "xcs" | "xrs"
    n: int
    orig_shape: tuple[int, int]
    tiles: list[tuple[int, int, np.ndarray, np.ndarray]]


def _layer_rng(seed: int, layer_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, layer_index])


def gen_mask_cf(model_spec, s: float, seed: int) -> SparsityPattern:
    """Filter/channel masks: prune floor(s * out_units) filters of every
    layer except the classifier head, zeroing their columns plus the
    matching row groups of the next layer. First-layer inputs and final
    outputs are never pruned."""
    if not 0 <= s < 1:
        raise ValueError(f"sparsity ratio must be in [0, 1), got {s}")
    infos = list(model_spec.unrolled_layers())
    if not infos:
        raise ValueError("model has no trainable layers")

    pruned: dict[int, np.ndarray] = {}
    for idx, info in enumerate(infos[:-1]):
        k = math.floor(s * info.cols)
        if k >= info.cols:
            raise ValueError(f"s={s} would prune all {info.cols} filters "
                             f"of layer {info.name}")
        chosen = _layer_rng(seed, idx).choice(info.cols, size=k, replace=False)
        pruned[idx] = np.sort(chosen)

    masks = {}
    for idx, info in enumerate(infos):
        keep_cols = np.ones(info.cols, dtype=bool)
        if idx in pruned:
            keep_cols[pruned[idx]] = False
        keep_rows = np.ones(info.rows, dtype=bool)
        if idx > 0 and pruned.get(idx - 1) is not None and pruned[idx - 1].size:
            rpc = info.rows_per_channel
            if info.in_channels != infos[idx - 1].cols or info.rows != info.in_channels * rpc:
                raise ValueError(f"layer {info.name} does not compose with "
                                 f"{infos[idx - 1].name} for C/F pruning")
            for c in pruned[idx - 1]:
                keep_rows[c * rpc:(c + 1) * rpc] = False
        masks[info.name] = np.outer(keep_rows, keep_cols).astype(float)
    return SparsityPattern("cf", s, seed, None, masks)


def _gen_mask_segments(model_spec, s, n, seed, kind) -> SparsityPattern:
    if not 0 <= s < 1:
        raise ValueError(f"sparsity ratio must be in [0, 1), got {s}")
    if n < 1:
        raise ValueError(f"segment length must be >= 1, got {n}")
    infos = list(model_spec.unrolled_layers())
    if not infos:
        raise ValueError("model has no trainable layers")
    masks = {}
    for idx, info in enumerate(infos):
        rows, cols = info.rows, info.cols
        mask = np.ones((rows, cols))
        if kind == "xcs":
            n_blocks = math.ceil(rows / n)
            count = n_blocks * cols
        else:
            n_blocks = math.ceil(cols / n)
            count = rows * n_blocks
        k = math.floor(s * count)
        if k >= count:
            raise ValueError(f"s={s} would prune every segment of layer {info.name}")
        chosen = _layer_rng(seed, idx).choice(count, size=k, replace=False)
        for seg in chosen:
            if kind == "xcs":
                rb, col = divmod(int(seg), cols)
                mask[rb * n:min(rows, (rb + 1) * n), col] = 0.0
            else:
                row, cb = divmod(int(seg), n_blocks)
                mask[row, cb * n:min(cols, (cb + 1) * n)] = 0.0
        masks[info.name] = mask
    return SparsityPattern(kind, s, seed, n, masks)


def gen_mask_xcs(model_spec, s: float, n: int, seed: int) -> SparsityPattern:
    """Crossbar-column sparsity: zero floor(s * count) of the length-n
    column segments on the (ceil(rows/n) x cols) grid of each layer."""
    return _gen_mask_segments(model_spec, s, n, seed, "xcs")


def gen_mask_xrs(model_spec, s: float, n: int, seed: int) -> SparsityPattern:
    """Crossbar-row sparsity: zero floor(s * count) of the length-n row
    segments on the (rows x ceil(cols/n)) grid of each layer."""
    return _gen_mask_segments(model_spec, s, n, seed, "xrs")


def cf_compaction(mask: np.ndarray) -> CfCompaction:
    """Per-layer C/F compaction from the layer's own mask: keep the rows
    and columns with any surviving weight."""
    mask = np.asarray(mask)
    return CfCompaction(
        orig_shape=mask.shape,
        kept_rows=np.flatnonzero(mask.any(axis=1)),
        kept_cols=np.flatnonzero(mask.any(axis=0)),
    )


def compact_cf(w_l: np.ndarray, w_next: np.ndarray,
               mask_l: np.ndarray | None = None,
               mask_next: np.ndarray | None = None):
    """Remove the all-zero columns of layer l and the matching unrolled row
    groups of layer l+1.

    Returns (compacted w_l, compacted w_next, (descriptor_l, descriptor_next)).
    Masks default to the nonzero structure of the matrices themselves.
    """
    w_l = np.asarray(w_l, dtype=float)
    w_next = np.asarray(w_next, dtype=float)
    mask_l = (w_l != 0) if mask_l is None else np.asarray(mask_l).astype(bool)
    mask_next = (w_next != 0) if mask_next is None else np.asarray(mask_next).astype(bool)
    if mask_l.shape != w_l.shape or mask_next.shape != w_next.shape:
        raise ValueError("mask shapes do not match the weight matrices")

    zero_cols = np.flatnonzero(~mask_l.any(axis=0))
    if w_next.shape[0] % w_l.shape[1] != 0:
        raise ValueError(f"next-layer rows {w_next.shape[0]} are not grouped by "
                         f"{w_l.shape[1]} output channels")
    rpc = w_next.shape[0] // w_l.shape[1]
    expected_rows = np.sort(np.concatenate(
        [np.arange(c * rpc, (c + 1) * rpc) for c in zero_cols])) if zero_cols.size else np.array([], dtype=int)
    zero_rows = np.flatnonzero(~mask_next.any(axis=1))
    if not np.array_equal(zero_rows, expected_rows):
        raise ValueError("inconsistent masks: zero columns of layer l do not "
                         "match zero row groups of layer l+1")

    desc_l = CfCompaction(w_l.shape, kept_rows=np.arange(w_l.shape[0]),
                          kept_cols=np.flatnonzero(mask_l.any(axis=0)))
    desc_next = CfCompaction(w_next.shape, kept_rows=np.flatnonzero(mask_next.any(axis=1)),
                             kept_cols=np.arange(w_next.shape[1]))
    return desc_l.apply(w_l), desc_next.apply(w_next), (desc_l, desc_next)


def _segment_packing(mask: np.ndarray, n: int, kind: str) -> SegmentPacking:
    rows, cols = mask.shape
    tiles = []
    if kind == "xcs":
        for rb in range(math.ceil(rows / n)):
            r0, r1 = rb * n, min(rows, (rb + 1) * n)
            surv = np.flatnonzero(mask[r0:r1, :].any(axis=0))
            for t in range(math.ceil(surv.size / n)):
                tiles.append((rb, t, np.arange(r0, r1), surv[t * n:(t + 1) * n]))
    else:
        for cb in range(math.ceil(cols / n)):
            c0, c1 = cb * n, min(cols, (cb + 1) * n)
            surv = np.flatnonzero(mask[:, c0:c1].any(axis=1))
            for t in range(math.ceil(surv.size / n)):
                tiles.append((t, cb, surv[t * n:(t + 1) * n], np.arange(c0, c1)))
    return SegmentPacking(kind, n, (rows, cols), tiles)


def compact_xcs(w: np.ndarray, n: int, mask: np.ndarray | None = None) -> SegmentPacking:
    """Pack the surviving column segments of each row block left to right
    into ceil(count/n) tiles of n columns. The returned descriptor lists
    every packed tile's source indices."""
    w = np.asarray(w)
    mask = (w != 0) if mask is None else np.asarray(mask).astype(bool)
    if mask.shape != w.shape:
        raise ValueError("mask shape does not match the weight matrix")
    return _segment_packing(mask, n, "xcs")


def compact_xrs(w: np.ndarray, n: int, mask: np.ndarray | None = None) -> SegmentPacking:
    """Row-segment analog of compact_xcs: pack surviving row segments of
    each column block top to bottom."""
    w = np.asarray(w)
    mask = (w != 0) if mask is None else np.asarray(mask).astype(bool)
    if mask.shape != w.shape:
        raise ValueError("mask shape does not match the weight matrix")
    return _segment_packing(mask, n, "xrs")


def tile_count_unpruned(rows: int, cols: int, n: int) -> int:
    return math.ceil(rows / n) * math.ceil(cols / n)


def compression_rate(model_spec, pattern: SparsityPattern | None, n: int) -> float:
    """Crossbar tiles needed for the unpruned model divided by tiles after
    compaction, both at tile size n."""
    infos = list(model_spec.unrolled_layers())
    unpruned = sum(tile_count_unpruned(i.rows, i.cols, n) for i in infos)
    if pattern is None:
        return 1.0
    total = 0
    for info in infos:
        mask = pattern.masks[info.name]
        if pattern.method == "cf":
            comp = cf_compaction(mask)
            total += tile_count_unpruned(comp.kept_rows.size, comp.kept_cols.size, n)
        else:
            total += len(_segment_packing(mask.astype(bool), n, pattern.method).tiles)
    if total == 0:
        raise ValueError("compacted model needs zero tiles; pattern is degenerate")
    return unpruned / total


def apply_mask(w: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Elementwise mask; pruned entries come back exactly zero."""
    w = np.asarray(w)
    mask = np.asarray(mask)
    if w.shape != mask.shape:
        raise ValueError(f"mask shape {mask.shape} does not match weights {w.shape}")
    return w * mask
