"""Mesh geometry: grid dimensions, slab ownership, coordinate mapping.

The computational mesh has ``n_u x n_v x n_w`` cells. The v axis is split
into contiguous row blocks (slabs), one per rank, balanced to within one
row. Complex mesh data is stored ``(plane, v_row, u_col)``, row-major.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GridSpec",
    "SlabRange",
    "ComplexGrid",
    "partition_1d",
    "owner_of_index",
    "slab_of",
    "uvw_to_cell",
    "plane_of_w",
    "owner_rank",
    "pixel_to_lm",
    "pixel_lm_blocks",
    "full_mesh_bytes",
]


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def partition_1d(n: int, parts: int, index: int) -> tuple[int, int]:
    """Balanced contiguous split of ``range(n)`` into ``parts`` blocks.

    Block ``index`` gets ``ceil(n/parts)`` items when ``index < n % parts``,
    else ``floor(n/parts)``. Returns ``(start, count)``.
    """
    if parts < 1 or not (0 <= index < parts):
        raise ValueError(f"invalid partition index {index} of {parts}")
    q, r = divmod(n, parts)
    if index < r:
        return index * (q + 1), q + 1
    return r * (q + 1) + (index - r) * q, q


def owner_of_index(n: int, parts: int, i: int) -> int:
    """Inverse of :func:`partition_1d`: which block owns item ``i``."""
    if not (0 <= i < n):
        raise ValueError(f"index {i} outside range(0, {n})")
    q, r = divmod(n, parts)
    boundary = r * (q + 1)
    if i < boundary:
        return i // (q + 1)
    return r + (i - boundary) // q


@dataclass(frozen=True)
class GridSpec:
    """Mesh geometry plus the native w extent the planes represent.

    ``n_u``/``n_v`` must be powers of two (the transform is radix-2) and the
    field of view implied by ``cell_size_lm`` must keep every image pixel
    inside the unit direction-cosine disc, corners included. Normalized w
    spans ``[w_min, w_max] = [0, 1]``; ``w_min_native``/``w_max_native``
    carry the physical w extent that range stands for.
    """

    n_u: int
    n_v: int
    n_w: int
    cell_size_lm: float
    w_min: float = 0.0
    w_max: float = 1.0
    w_min_native: float = 0.0
    w_max_native: float = 0.0

    def __post_init__(self):
        if self.n_u < 2 or not _is_pow2(self.n_u):
            raise ValueError(f"n_u must be a power of two >= 2, got {self.n_u}")
        if self.n_v < 2 or not _is_pow2(self.n_v):
            raise ValueError(f"n_v must be a power of two >= 2, got {self.n_v}")
        if self.n_w < 1:
            raise ValueError(f"n_w must be >= 1, got {self.n_w}")
        if self.cell_size_lm <= 0.0:
            raise ValueError("cell_size_lm must be positive")
        half_l = self.n_u * self.cell_size_lm / 2.0
        half_m = self.n_v * self.cell_size_lm / 2.0
        # Per-axis bounds alone do not keep the image corners inside the
        # unit disc, which the w correction requires.
        if half_l >= 1.0 or half_m >= 1.0 or half_l * half_l + half_m * half_m >= 1.0:
            raise ValueError("field of view too wide: corner pixels leave the unit disc")
        if self.w_min_native > self.w_max_native:
            raise ValueError("w_min_native must be <= w_max_native")

    @property
    def w_range_native(self) -> float:
        return self.w_max_native - self.w_min_native

    def plane_w_native(self, k: int) -> float:
        """Native w value sampled by plane ``k``.

        Planes sample normalized w at ``k / (n_w - 1)``; a single plane
        represents the midpoint of the native range.
        """
        if not (0 <= k < self.n_w):
            raise ValueError(f"plane {k} outside range(0, {self.n_w})")
        if self.n_w == 1:
            return 0.5 * (self.w_min_native + self.w_max_native)
        frac = k / (self.n_w - 1)
        return self.w_min_native + frac * self.w_range_native


@dataclass(frozen=True)
class SlabRange:
    """Contiguous block of v rows owned by one rank."""

    rank: int
    v_start: int
    v_count: int

    @property
    def v_end(self) -> int:
        return self.v_start + self.v_count

    def contains_row(self, j: int) -> bool:
        return self.v_start <= j < self.v_end


@dataclass
class ComplexGrid:
    """Gridded complex values on one slab, laid out (plane, v_row, u_col)."""

    spec: GridSpec
    slab: SlabRange
    data: np.ndarray = field(default=None)

    def __post_init__(self):
        shape = (self.spec.n_w, self.slab.v_count, self.spec.n_u)
        if self.data is None:
            self.data = np.zeros(shape, dtype=np.complex128)
        else:
            self.data = np.ascontiguousarray(self.data, dtype=np.complex128)
            if self.data.shape != shape:
                raise ValueError(f"grid data shape {self.data.shape} != {shape}")

    def copy(self) -> "ComplexGrid":
        return ComplexGrid(self.spec, self.slab, self.data.copy())


def slab_of(spec: GridSpec, rank: int, n_ranks: int) -> SlabRange:
    """Slab owned by ``rank`` when ``n_v`` rows are split over ``n_ranks``."""
    if n_ranks < 1 or not (0 <= rank < n_ranks):
        raise ValueError(f"invalid rank {rank} of {n_ranks}")
    if n_ranks > spec.n_v:
        raise ValueError(f"n_ranks {n_ranks} exceeds n_v {spec.n_v}")
    start, count = partition_1d(spec.n_v, n_ranks, rank)
    return SlabRange(rank=rank, v_start=start, v_count=count)


def plane_of_w(spec: GridSpec, w: float) -> int:
    """Nearest w plane for a normalized w in [0, 1] (half rounds up)."""
    if spec.n_w == 1:
        return 0
    k = int(np.floor(w * (spec.n_w - 1) + 0.5))
    return min(max(k, 0), spec.n_w - 1)


def uvw_to_cell(spec: GridSpec, rec_u: float, rec_v: float, rec_w: float):
    """Map normalized (u, v, w) to fractional cell coordinates and a plane.

    Returns ``(gu, gv, plane)`` with ``gu = u * n_u``, ``gv = v * n_v`` and
    the plane index of the closest w plane.
    """
    if not (0.0 <= rec_u < 1.0 and 0.0 <= rec_v < 1.0):
        raise ValueError(f"u/v coordinate outside [0, 1): ({rec_u}, {rec_v})")
    if not (0.0 <= rec_w <= 1.0):
        raise ValueError(f"w coordinate outside [0, 1]: {rec_w}")
    return rec_u * spec.n_u, rec_v * spec.n_v, plane_of_w(spec, rec_w)


def owner_rank(spec: GridSpec, gv: float, n_ranks: int) -> int:
    """Rank whose slab contains the row ``floor(gv)``."""
    if not (0.0 <= gv < spec.n_v):
        raise ValueError(f"gv {gv} outside [0, {spec.n_v})")
    return owner_of_index(spec.n_v, n_ranks, int(gv))


def pixel_to_lm(spec: GridSpec, i: int, j: int) -> tuple[float, float]:
    """Direction cosines of image pixel (column i, row j).

    The phase center sits at pixel ``(n_u/2, n_v/2)``.
    """
    if not (0 <= i < spec.n_u and 0 <= j < spec.n_v):
        raise ValueError(f"pixel ({i}, {j}) outside the image")
    l = (i - spec.n_u // 2) * spec.cell_size_lm
    m = (j - spec.n_v // 2) * spec.cell_size_lm
    return l, m


def pixel_lm_blocks(spec: GridSpec, v_start: int, v_count: int):
    """(l, m) arrays for a block of image rows, shaped (v_count, n_u)."""
    cols = np.arange(spec.n_u, dtype=np.float64) - spec.n_u // 2
    rows = np.arange(v_start, v_start + v_count, dtype=np.float64) - spec.n_v // 2
    l = np.broadcast_to(cols * spec.cell_size_lm, (v_count, spec.n_u))
    m = np.broadcast_to((rows * spec.cell_size_lm)[:, None], (v_count, spec.n_u))
    return l, m


def full_mesh_bytes(spec: GridSpec) -> int:
    """Bytes of one full-mesh complex grid (8-byte real + 8-byte imaginary)."""
    return spec.n_u * spec.n_v * spec.n_w * 16
