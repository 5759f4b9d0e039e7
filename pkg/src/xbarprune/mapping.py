"""Layer weights to crossbar tiles and back.

The forward path is compaction T (optional) -> column rearrangement R
(optional) -> partition into padded n x n tiles -> conductance encoding;
after the circuit has been simulated the non-ideal conductances are
decoded and the inverse transforms R^-1, T^-1 reassemble a full-size
non-ideal weight matrix. A MappingRecord carries everything needed for
the exact inversion.

Signed weights are encoded as magnitude-to-conductance with a digitally
tracked sign applied at decode time, so a single crossbar per tile
suffices. Zero and padded weights sit exactly at g_min with sign 0 and
decode back to exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .circuit import (
    CrossbarParams,
    CrossbarSystem,
    NfReport,
    apply_device_variation,
    ideal_mac,
    nonideality_factor,
)
from .pruning import CfCompaction, SegmentPacking

REARRANGE_ORDERS = ("ascending", "center_out")


@dataclass
class TilePlacement:
    """Where one padded tile's real content lives in the source matrix."""

    row_block: int
    col_block: int
    rows: np.ndarray      # source row indices, length <= n
    cols: np.ndarray      # source column indices, length <= n


@dataclass
class MappingRecord:
    """Bookkeeping needed to invert a layer mapping exactly."""

    w_scale: float
    signs: np.ndarray                      # sign matrix of the tiled matrix
    assembled_shape: tuple[int, int]
    row_pad: int
    col_pad: int
    tile_placements: list[TilePlacement]
    column_permutation: np.ndarray | None = None
    pruning_compaction: object | None = None   # CfCompaction | SegmentPacking


@dataclass
class LayerNfReport:
    """Non-ideality factors aggregated over one layer's tiles."""

    per_tile_mean: np.ndarray              # NaN where a tile had no valid column
    per_column: np.ndarray                 # all defined per-column NFs, concatenated
    mean_nf: float | None                  # mean of defined per-tile means
    tile_reports: list[NfReport] = field(default_factory=list)


@dataclass
class LayerSimResult:
    w_nonideal: np.ndarray
    nf: LayerNfReport
    record: MappingRecord


# ------------------------------------------------------------- encoding


def weights_to_conductances(w_tile: np.ndarray, w_scale: float,
                            params: CrossbarParams):
    """Affine magnitude encoding G = g_min + |W| / w_scale * (g_max - g_min),
    returning the conductance tile and the sign matrix."""
    w_tile = np.asarray(w_tile, dtype=float)
    if w_scale <= 0:
        raise ValueError(f"w_scale must be positive, got {w_scale}")
    if np.any(np.abs(w_tile) > w_scale):
        raise ValueError("tile contains |weights| above w_scale")
    g = params.g_min + np.abs(w_tile) / w_scale * (params.g_max - params.g_min)
    return g, np.sign(w_tile)


def conductances_to_weights(g_eff: np.ndarray, signs: np.ndarray,
                            w_scale: float, params: CrossbarParams) -> np.ndarray:
    """Inverse of the affine encoding with the stored signs; sign-0 entries
    (true zeros and padding) are forced back to exactly zero. Effective
    conductances below g_min (IR drop) decode to magnitude-shifted values."""
    g_eff = np.asarray(g_eff, dtype=float)
    signs = np.asarray(signs, dtype=float)
    if g_eff.shape != signs.shape:
        raise ValueError(f"shape mismatch: {g_eff.shape} vs signs {signs.shape}")
    w = (g_eff - params.g_min) / (params.g_max - params.g_min) * w_scale * signs
    w[signs == 0] = 0.0
    return w


# ------------------------------------------------------------ tiling


def _gather_tile(mat: np.ndarray, pl: TilePlacement, n: int) -> np.ndarray:
    tile = np.zeros((n, n))
    tile[:pl.rows.size, :pl.cols.size] = mat[np.ix_(pl.rows, pl.cols)]
    return tile


def partition(w: np.ndarray, n: int):
    """Split into ceil(rows/n) x ceil(cols/n) zero-padded n x n tiles."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or w.size == 0:
        raise ValueError(f"cannot partition matrix of shape {w.shape}")
    if n < 1:
        raise ValueError(f"tile size must be >= 1, got {n}")
    rows, cols = w.shape
    rb, cb = math.ceil(rows / n), math.ceil(cols / n)
    placements = []
    for i in range(rb):
        for j in range(cb):
            placements.append(TilePlacement(
                row_block=i, col_block=j,
                rows=np.arange(i * n, min(rows, (i + 1) * n)),
                cols=np.arange(j * n, min(cols, (j + 1) * n)),
            ))
    record = MappingRecord(
        w_scale=float(np.max(np.abs(w))),
        signs=np.sign(w),
        assembled_shape=(rows, cols),
        row_pad=rb * n - rows,
        col_pad=cb * n - cols,
        tile_placements=placements,
    )
    return [_gather_tile(w, pl, n) for pl in placements], record


def recombine(tiles: list[np.ndarray], record: MappingRecord) -> np.ndarray:
    """Strip padding, scatter tiles back, undo R and T."""
    if len(tiles) != len(record.tile_placements):
        raise ValueError(f"{len(tiles)} tiles for {len(record.tile_placements)} "
                         "recorded placements")
    out = np.zeros(record.assembled_shape)
    for tile, pl in zip(tiles, record.tile_placements):
        if tile.shape[0] < pl.rows.size or tile.shape[1] < pl.cols.size:
            raise ValueError("tile smaller than its recorded placement")
        out[np.ix_(pl.rows, pl.cols)] = tile[:pl.rows.size, :pl.cols.size]
    if record.column_permutation is not None:
        restored = np.empty_like(out)
        restored[:, record.column_permutation] = out
        out = restored
    if isinstance(record.pruning_compaction, CfCompaction):
        out = record.pruning_compaction.invert(out)
    return out


# --------------------------------------------------------- rearrangement


def column_metric(column: np.ndarray) -> float:
    """sqrt(mean(|w|) * population_std(|w|)) of one column."""
    a = np.abs(np.asarray(column, dtype=float))
    if a.size == 0:
        raise ValueError("empty column")
    return float(np.sqrt(a.mean() * a.std()))


def column_metrics(w: np.ndarray) -> np.ndarray:
    a = np.abs(np.asarray(w, dtype=float))
    return np.sqrt(a.mean(axis=0) * a.std(axis=0))


def rearrange_columns(w: np.ndarray, order: str = "ascending"):
    """Sort columns by ascending sqrt(mu * sigma) of absolute weights
    (stable), or place the lowest-metric columns at the center with
    order="center_out". Returns the rearranged matrix and the permutation
    p with new[:, k] = old[:, p[k]]."""
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or w.shape[1] == 0:
        raise ValueError("need a matrix with at least one column")
    if order not in REARRANGE_ORDERS:
        raise ValueError(f"order must be one of {REARRANGE_ORDERS}, got {order!r}")
    ascending = np.argsort(column_metrics(w), kind="stable")
    if order == "ascending":
        perm = ascending
    else:
        c = w.shape[1]
        slots = sorted(range(c), key=lambda j: (abs(j - (c - 1) / 2), j))
        perm = np.empty(c, dtype=int)
        for rank, slot in enumerate(slots):
            perm[slot] = ascending[rank]
    return w[:, perm], perm


# ------------------------------------------------------- layer pipeline


def _tile_rng(master_seed: int, layer_index: int, pl: TilePlacement) -> np.random.Generator:
    # stream depends only on identity, never on execution order
    return np.random.default_rng([master_seed, layer_index, pl.row_block, pl.col_block])


def aggregate_nf(reports: list[NfReport]) -> LayerNfReport:
    per_tile = np.array([np.nan if r.mean_nf is None else r.mean_nf for r in reports])
    defined = per_tile[~np.isnan(per_tile)]
    columns = [r.per_column_nf[~np.isnan(r.per_column_nf)] for r in reports]
    return LayerNfReport(
        per_tile_mean=per_tile,
        per_column=np.concatenate(columns) if columns else np.empty(0),
        mean_nf=float(defined.mean()) if defined.size else None,
        tile_reports=reports,
    )


def _prepare(w, params, rearrange, rearrange_order, compaction):
    w = np.asarray(w, dtype=float)
    if w.ndim != 2 or w.size == 0:
        raise ValueError(f"need a nonempty 2-D weight matrix, got shape {w.shape}")
    if not np.all(np.isfinite(w)):
        raise ValueError("weight matrix contains non-finite entries")
    if params.n_rows != params.n_cols:
        raise ValueError("layer simulation uses square tiles; params must have "
                         "n_rows == n_cols")
    n = params.n_rows
    w_scale = float(np.max(np.abs(w)))
    if w_scale <= 0:
        raise ValueError("layer weights are all zero; nothing to map")

    if isinstance(compaction, SegmentPacking):
        if rearrange:
            raise ValueError("column rearrangement needs a matrix-form layout; "
                             "it cannot follow XCS/XRS segment packing")
        if compaction.orig_shape != w.shape:
            raise ValueError(f"packing was built for {compaction.orig_shape}, "
                             f"matrix is {w.shape}")
        if compaction.n != n:
            raise ValueError(f"packing tile size {compaction.n} != crossbar size {n}")
        placements = [TilePlacement(br, bc, rows, cols)
                      for br, bc, rows, cols in compaction.tiles]
        record = MappingRecord(
            w_scale=w_scale, signs=np.sign(w), assembled_shape=w.shape,
            row_pad=0, col_pad=0, tile_placements=placements,
            pruning_compaction=compaction,
        )
        return w, record, n

    mat = compaction.apply(w) if isinstance(compaction, CfCompaction) else w
    perm = None
    if rearrange:
        mat, perm = rearrange_columns(mat, rearrange_order)
    _, record = partition(mat, n)
    record.w_scale = w_scale
    record.column_permutation = perm
    record.pruning_compaction = compaction
    return mat, record, n


def simulate_layer(w: np.ndarray, params: CrossbarParams, *,
                   rearrange: bool = False, rearrange_order: str = "ascending",
                   compaction: object | None = None, master_seed: int = 0,
                   layer_index: int = 0,
                   nf_epsilon: float = 1e-12) -> LayerSimResult:
    """Full per-layer pipeline: T -> R -> partition -> encode -> device
    variation -> effective conductances -> decode -> recombine (R^-1, T^-1),
    with an NF report from all-ones inputs on every tile."""
    mat, record, n = _prepare(w, params, rearrange, rearrange_order, compaction)
    ones = np.full(n, params.v_read)
    out_tiles, reports = [], []
    for pl in record.tile_placements:
        g, signs = weights_to_conductances(_gather_tile(mat, pl, n),
                                           record.w_scale, params)
        g_var = apply_device_variation(g, params.sigma_dev,
                                       _tile_rng(master_seed, layer_index, pl))
        system = CrossbarSystem(g_var, params)
        g_eff = system.effective_conductance()
        out_tiles.append(conductances_to_weights(g_eff, signs,
                                                 record.w_scale, params))
        reports.append(nonideality_factor(ideal_mac(g, ones),
                                          system.solve(ones).currents,
                                          nf_epsilon))
    return LayerSimResult(
        w_nonideal=recombine(out_tiles, record),
        nf=aggregate_nf(reports),
        record=record,
    )


def layer_nf(w: np.ndarray, params: CrossbarParams, *,
             rearrange: bool = False, rearrange_order: str = "ascending",
             compaction: object | None = None, master_seed: int = 0,
             layer_index: int = 0, nf_epsilon: float = 1e-12) -> LayerNfReport:
    """NF report only: same tile preparation as simulate_layer but skips the
    per-row extraction and decode, so it is roughly n_rows times cheaper."""
    mat, record, n = _prepare(w, params, rearrange, rearrange_order, compaction)
    ones = np.full(n, params.v_read)
    reports = []
    for pl in record.tile_placements:
        g, _ = weights_to_conductances(_gather_tile(mat, pl, n),
                                       record.w_scale, params)
        g_var = apply_device_variation(g, params.sigma_dev,
                                       _tile_rng(master_seed, layer_index, pl))
        reports.append(nonideality_factor(
            ideal_mac(g, ones),
            CrossbarSystem(g_var, params).solve(ones).currents,
            nf_epsilon))
    return aggregate_nf(reports)
