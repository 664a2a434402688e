"""Board model: marker dictionary, geometry, ground-truth rendering, 3D points.

Coordinate conventions used throughout the package:

* Image coordinates: origin at the top-left, x to the right, y down,
  pixel centers at integer coordinates (pixel (i, j) covers the square
  [x-0.5, x+0.5] x [y-0.5, y+0.5] of the continuous plane).
* Board grid: square (col, row) indexed from the top-left square of the
  render; the top-left square is black, so the 12 white squares hosting
  markers are those with (col + row) odd, assigned marker ids 0..11 in
  row-major reading order.
* Inner-corner ids: id 0 at the bottom-left inner corner, id 15 at the
  top-right, row-major bottom-to-top (id = 4 * row_from_bottom + col).
* Marker bits: 1 = white cell, 0 = black cell, row-major top-to-bottom
  in the marker's canonical (as-rendered) orientation. Rotation index r
  means "canonical pattern rotated r * 90 degrees clockwise".
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Dictionary",
    "BoardSpec",
    "ObjectPoint",
    "DictionaryError",
    "RenderError",
    "rotate_bits",
    "load_dictionary",
    "save_dictionary",
    "default_dictionary",
    "match_marker_bits",
    "render_board",
    "board_pattern",
    "board_object_points",
    "inner_corner_grid",
    "marker_square_indices",
]


class DictionaryError(ValueError):
    """Raised for malformed or ambiguous dictionary files."""


class RenderError(ValueError):
    """Raised when a board cannot be rasterized at the requested scale."""


def rotate_bits(bits: np.ndarray, rotation: int) -> np.ndarray:
    """Rotate a bit matrix by ``rotation`` * 90 degrees clockwise."""
    return np.rot90(bits, -(rotation % 4))


@dataclass(frozen=True)
class Dictionary:
    """Ordered set of square marker bit patterns, distinct under rotation."""

    entries: tuple[np.ndarray, ...]
    name: str = "custom"

    def __post_init__(self) -> None:
        if not self.entries:
            raise DictionaryError("dictionary has no entries")
        side = self.entries[0].shape[0]
        if side < 3 or side % 2 == 0:
            raise DictionaryError(f"entry side length {side} must be odd and >= 3")
        frozen = []
        for i, e in enumerate(self.entries):
            e = np.ascontiguousarray(e, dtype=np.uint8)
            if e.shape != (side, side):
                raise DictionaryError(f"entry {i} has shape {e.shape}, expected ({side}, {side})")
            if not np.isin(e, (0, 1)).all():
                raise DictionaryError(f"entry {i} contains values other than 0/1")
            e.setflags(write=False)
            frozen.append(e)
        object.__setattr__(self, "entries", tuple(frozen))
        for i in range(len(self.entries)):
            for j in range(i + 1, len(self.entries)):
                for r in range(4):
                    if np.array_equal(self.entries[i], rotate_bits(self.entries[j], r)):
                        raise DictionaryError(
                            f"rotation-ambiguous dictionary: entry {j} rotated {r * 90} deg "
                            f"equals entry {i}"
                        )

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def bits_per_side(self) -> int:
        return self.entries[0].shape[0]


def load_dictionary(path: str | Path) -> Dictionary:
    """Parse a dictionary file: one entry per line, ``side**2`` chars of 0/1.

    Lines starting with ``#`` and blank lines are ignored. Entry order is
    preserved.
    """
    path = Path(path)
    entries = []
    side = None
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if set(line) - {"0", "1"}:
            raise DictionaryError(f"{path}:{lineno}: malformed line (expected only 0/1 characters)")
        n = len(line)
        s = int(round(n ** 0.5))
        if s * s != n or s < 3 or s % 2 == 0:
            raise DictionaryError(
                f"{path}:{lineno}: wrong bit count {n} (expected an odd square >= 9)"
            )
        if side is None:
            side = s
        elif s != side:
            raise DictionaryError(f"{path}:{lineno}: wrong bit count {n} (other entries use {side * side})")
        entries.append(np.array([int(c) for c in line], dtype=np.uint8).reshape(s, s))
    if not entries:
        raise DictionaryError(f"{path}: no entries found")
    return Dictionary(entries=tuple(entries), name=path.stem)


def save_dictionary(dictionary: Dictionary, path: str | Path) -> None:
    """Write a dictionary in the text format read by :func:`load_dictionary`."""
    lines = [f"# {dictionary.name}: {len(dictionary)} entries of {dictionary.bits_per_side}x{dictionary.bits_per_side} bits."]
    for e in dictionary.entries:
        lines.append("".join(str(int(v)) for v in e.flatten()))
    Path(path).write_text("\n".join(lines) + "\n")


def default_dictionary() -> Dictionary:
    """The shipped 12-entry 5x5 dictionary."""
    ref = importlib.resources.files("charuco_forge.data").joinpath("dict_5x5_12.txt")
    with importlib.resources.as_file(ref) as path:
        d = load_dictionary(path)
    return Dictionary(entries=d.entries, name="dict_5x5_12")


def match_marker_bits(
    bits: np.ndarray, dictionary: Dictionary, max_hamming: int
) -> tuple[int, int] | None:
    """Find the dictionary entry/rotation closest to ``bits``.

    Returns ``(id, rotation)`` minimizing the Hamming distance over all
    entries and the four planar rotations, or ``None`` if the minimum
    exceeds ``max_hamming``. Ties break to the lowest id, then the lowest
    rotation.
    """
    bits = np.asarray(bits)
    side = dictionary.bits_per_side
    if bits.shape != (side, side):
        raise ValueError(f"bit matrix shape {bits.shape} does not match dictionary ({side}, {side})")
    best: tuple[int, int] | None = None
    best_d = max_hamming + 1
    for idx, entry in enumerate(dictionary.entries):
        for r in range(4):
            d = int(np.sum(bits != rotate_bits(entry, r)))
            if d < best_d:
                best_d = d
                best = (idx, r)
    return best


@dataclass(frozen=True)
class BoardSpec:
    """Geometry and dictionary of a chessboard-with-markers target."""

    squares_x: int = 5
    squares_y: int = 5
    square_length: float = 0.02
    marker_length: float = 0.015
    dictionary: Dictionary = field(default_factory=default_dictionary)
    marker_border_bits: int = 1

    def __post_init__(self) -> None:
        if self.squares_x < 2 or self.squares_y < 2:
            raise ValueError("board needs at least 2x2 squares")
        if not 0 < self.marker_length < self.square_length:
            raise ValueError("marker_length must be positive and smaller than square_length")
        if self.marker_border_bits < 1:
            raise ValueError("marker_border_bits must be >= 1")
        n_white = len(marker_square_indices(self.squares_x, self.squares_y))
        if n_white != len(self.dictionary):
            raise ValueError(
                f"board has {n_white} white squares but dictionary has {len(self.dictionary)} entries"
            )

    @property
    def corners_x(self) -> int:
        return self.squares_x - 1

    @property
    def corners_y(self) -> int:
        return self.squares_y - 1

    @property
    def num_corners(self) -> int:
        return self.corners_x * self.corners_y

    @property
    def marker_cells(self) -> int:
        """Marker side length in cells, border included."""
        return self.dictionary.bits_per_side + 2 * self.marker_border_bits


@dataclass(frozen=True)
class ObjectPoint:
    id: int
    x: float
    y: float
    z: float = 0.0


def marker_square_indices(squares_x: int, squares_y: int) -> list[tuple[int, int]]:
    """(col, row) grid positions of the white squares, in reading order.

    The top-left square is black, so white squares are those with odd
    (col + row); marker k occupies the k-th white square.
    """
    out = []
    for row in range(squares_y):
        for col in range(squares_x):
            if (col + row) % 2 == 1:
                out.append((col, row))
    return out


def inner_corner_grid(spec: BoardSpec) -> list[tuple[int, int, int]]:
    """(id, col, row_from_bottom) for every inner corner, id ascending."""
    out = []
    for cid in range(spec.num_corners):
        col = cid % spec.corners_x
        row_from_bottom = cid // spec.corners_x
        out.append((cid, col, row_from_bottom))
    return out


def board_object_points(spec: BoardSpec) -> list[ObjectPoint]:
    """3D corner positions in a bottom-left-origin board frame (Z = 0, Y up)."""
    s = spec.square_length
    return [
        ObjectPoint(cid, (col + 1) * s, (row + 1) * s, 0.0)
        for cid, col, row in inner_corner_grid(spec)
    ]


def _marker_black_rects(
    spec: BoardSpec, col: int, row: int, marker_index: int, pps: float, origin: float
) -> list[tuple[float, float, float, float]]:
    """Axis-aligned black rectangles of one marker, in continuous board pixels."""
    ratio = spec.marker_length / spec.square_length
    m_side = pps * ratio
    cell = m_side / spec.marker_cells
    x0 = origin + col * pps + (pps - m_side) / 2.0
    y0 = origin + row * pps + (pps - m_side) / 2.0
    b = spec.marker_border_bits
    n = spec.marker_cells
    rects = []
    # Border ring as four strips.
    rects.append((x0, y0, x0 + n * cell, y0 + b * cell))
    rects.append((x0, y0 + (n - b) * cell, x0 + n * cell, y0 + n * cell))
    rects.append((x0, y0 + b * cell, x0 + b * cell, y0 + (n - b) * cell))
    rects.append((x0 + (n - b) * cell, y0 + b * cell, x0 + n * cell, y0 + (n - b) * cell))
    bits = spec.dictionary.entries[marker_index]
    for r in range(spec.dictionary.bits_per_side):
        for c in range(spec.dictionary.bits_per_side):
            if bits[r, c] == 0:
                cx0 = x0 + (c + b) * cell
                cy0 = y0 + (r + b) * cell
                rects.append((cx0, cy0, cx0 + cell, cy0 + cell))
    return rects


def _board_black_rects(spec: BoardSpec, pps: float, margin: float) -> list[tuple[float, float, float, float]]:
    rects = []
    for row in range(spec.squares_y):
        for col in range(spec.squares_x):
            if (col + row) % 2 == 0:
                x0 = margin + col * pps
                y0 = margin + row * pps
                rects.append((x0, y0, x0 + pps, y0 + pps))
    for k, (col, row) in enumerate(marker_square_indices(spec.squares_x, spec.squares_y)):
        rects.extend(_marker_black_rects(spec, col, row, k, pps, margin))
    return rects


def _coverage_profile(lo: float, hi: float, n: int) -> np.ndarray:
    """Per-pixel overlap of [lo, hi] with pixel footprints [i-0.5, i+0.5]."""
    i = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(hi, i + 0.5) - np.maximum(lo, i - 0.5), 0.0, 1.0)


def render_board(
    spec: BoardSpec, pixels_per_square: int, margin_px: int = 0
) -> tuple["GrayImage", list[tuple[int, float, float]]]:
    """Rasterize the board with exact area-coverage antialiasing.

    Returns the image and the ground truth: ``(id, x, y)`` pixel coordinates
    of all inner corners, which fall exactly on square boundaries. Pixels
    whose footprint straddles a black/white boundary receive the fractional
    coverage value (e.g. 127.5 on a boundary line); all others are 0 or 255.
    This keeps the reconstructable corner position at the stated ground
    truth instead of biasing it by half a pixel.
    """
    from .image import GrayImage

    if pixels_per_square < 2 * spec.marker_cells:
        raise RenderError(
            f"pixels_per_square {pixels_per_square} too small to render "
            f"{spec.marker_cells} marker cells (need >= {2 * spec.marker_cells})"
        )
    if margin_px < 0:
        raise RenderError("margin_px must be >= 0")
    w = spec.squares_x * pixels_per_square + 2 * margin_px
    h = spec.squares_y * pixels_per_square + 2 * margin_px
    black = np.zeros((h, w), dtype=np.float64)
    for x0, y0, x1, y1 in _board_black_rects(spec, float(pixels_per_square), float(margin_px)):
        px = _coverage_profile(x0, x1, w)
        py = _coverage_profile(y0, y1, h)
        xs = np.nonzero(px)[0]
        ys = np.nonzero(py)[0]
        if xs.size == 0 or ys.size == 0:
            continue
        sl = (slice(ys[0], ys[-1] + 1), slice(xs[0], xs[-1] + 1))
        black[sl] += np.outer(py[ys[0] : ys[-1] + 1], px[xs[0] : xs[-1] + 1])
    # Marker white cells were not subtracted: marker rects listed only black
    # geometry, and black rects never overlap, so coverage stays in [0, 1].
    black = np.clip(black, 0.0, 1.0)
    black[black < 1e-9] = 0.0
    black[black > 1.0 - 1e-9] = 1.0
    pixels = 255.0 * (1.0 - black)
    ground_truth = []
    for cid, col, row_from_bottom in inner_corner_grid(spec):
        x = margin_px + (col + 1) * float(pixels_per_square)
        y = margin_px + (spec.corners_y - row_from_bottom) * float(pixels_per_square)
        ground_truth.append((cid, x, y))
    return GrayImage(pixels), ground_truth


def board_pattern(spec: BoardSpec, u: np.ndarray, v: np.ndarray, margin: float = 0.0) -> np.ndarray:
    """Evaluate the continuous board pattern at points (u, v).

    Coordinates are in board pixels with one square = 1.0 * ``pps``-free
    units scaled by the caller; here one square spans exactly 1.0 unit and
    the board occupies [margin, squares_x + margin] x [margin, squares_y +
    margin]. Returns intensities in {0.0, 255.0}; outside the board and
    margin the background is black (0.0).
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    out = np.zeros(u.shape, dtype=np.float64)
    total_w = spec.squares_x + 2 * margin
    total_h = spec.squares_y + 2 * margin
    inside = (u >= 0) & (u < total_w) & (v >= 0) & (v < total_h)
    out[inside] = 255.0
    bu = u - margin
    bv = v - margin
    on_board = inside & (bu >= 0) & (bu < spec.squares_x) & (bv >= 0) & (bv < spec.squares_y)
    col = np.floor(bu).astype(np.int64)
    row = np.floor(bv).astype(np.int64)
    black_sq = on_board & ((col + row) % 2 == 0)
    out[black_sq] = 0.0

    ratio = spec.marker_length / spec.square_length
    inset = (1.0 - ratio) / 2.0
    cell = ratio / spec.marker_cells
    white_sq = on_board & ~((col + row) % 2 == 0)
    if np.any(white_sq):
        lu = bu[white_sq] - col[white_sq]
        lv = bv[white_sq] - row[white_sq]
        in_marker = (lu >= inset) & (lu < 1.0 - inset) & (lv >= inset) & (lv < 1.0 - inset)
        cc = np.floor((lu - inset) / cell).astype(np.int64)
        cr = np.floor((lv - inset) / cell).astype(np.int64)
        n = spec.marker_cells
        cc = np.clip(cc, 0, n - 1)
        cr = np.clip(cr, 0, n - 1)
        b = spec.marker_border_bits
        border = in_marker & ((cc < b) | (cc >= n - b) | (cr < b) | (cr >= n - b))
        # Map white-square grid position to marker index.
        marker_of = -np.ones((spec.squares_y, spec.squares_x), dtype=np.int64)
        for k, (mc, mr) in enumerate(marker_square_indices(spec.squares_x, spec.squares_y)):
            marker_of[mr, mc] = k
        midx = marker_of[row[white_sq], col[white_sq]]
        bits = np.stack(spec.dictionary.entries)  # (n_markers, s, s)
        br = np.clip(cr - b, 0, spec.dictionary.bits_per_side - 1)
        bc = np.clip(cc - b, 0, spec.dictionary.bits_per_side - 1)
        bit_black = in_marker & ~border & (bits[midx, br, bc] == 0)
        vals = np.full(lu.shape, 255.0)
        vals[border | bit_black] = 0.0
        out[white_sq] = vals
    return out
