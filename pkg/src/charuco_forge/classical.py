"""Classical board detector: threshold, quad extraction, decode, interpolate.

The stages mirror the usual square-fiducial pipeline: adaptive threshold,
border-following contour extraction on dark regions, polygon
simplification to convex quads, perspective unwarp and bit decoding
against a dictionary, homography-based interpolation of the inner
chessboard corners, and gradient-driven subpixel refinement.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage

from .board import BoardSpec, Dictionary, inner_corner_grid, marker_square_indices, match_marker_bits
from .image import GrayImage, Homography, bilinear_sample, fit_homography, warp_points

__all__ = [
    "MarkerCandidate",
    "DetectedCorner",
    "ChArUcoDetection",
    "ClassicalParams",
    "adaptive_threshold",
    "find_quads",
    "decode_candidate",
    "interpolate_corners",
    "corner_subpix",
    "detect_classical",
    "detection_to_csv",
    "detection_from_csv",
]


@dataclass(frozen=True)
class MarkerCandidate:
    """A convex quad, optionally decoded to a dictionary id + rotation."""

    quad: np.ndarray  # (4, 2) image points, CCW starting nearest top-left
    bits: np.ndarray | None = None
    id: int | None = None
    rotation: int | None = None


@dataclass(frozen=True)
class DetectedCorner:
    id: int
    x: float
    y: float
    confidence: float = 1.0


@dataclass(frozen=True)
class ChArUcoDetection:
    corners: tuple[DetectedCorner, ...]
    source: str = "classical"

    def __post_init__(self) -> None:
        ids = [c.id for c in self.corners]
        if len(ids) != len(set(ids)):
            raise ValueError("detection contains duplicate corner ids")
        object.__setattr__(self, "corners", tuple(self.corners))

    def __len__(self) -> int:
        return len(self.corners)

    def points(self) -> np.ndarray:
        return np.array([(c.x, c.y) for c in self.corners], dtype=np.float64).reshape(-1, 2)

    def ids(self) -> list[int]:
        return [c.id for c in self.corners]


def detection_to_csv(det: ChArUcoDetection) -> str:
    buf = io.StringIO()
    buf.write("id,x,y,confidence\n")
    for c in det.corners:
        buf.write(f"{c.id},{c.x:.6g},{c.y:.6g},{c.confidence:.6g}\n")
    return buf.getvalue()


def detection_from_csv(text: str, source: str = "classical") -> ChArUcoDetection:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if not lines or lines[0].split(",")[0] != "id":
        raise ValueError("detection CSV must start with an 'id,x,y,confidence' header")
    corners = []
    for ln in lines[1:]:
        cid, x, y, conf = ln.split(",")
        corners.append(DetectedCorner(int(cid), float(x), float(y), float(conf)))
    return ChArUcoDetection(tuple(corners), source=source)


def adaptive_threshold(img: GrayImage, window: int, offset: float) -> GrayImage:
    """Binarize: 255 where value > local boxed mean - offset, else 0."""
    if window < 3 or window % 2 == 0:
        raise ValueError("window must be odd and >= 3")
    r = window // 2
    src = np.pad(img.pixels, r, mode="edge")
    c = np.cumsum(np.cumsum(np.pad(src, ((1, 0), (1, 0))), axis=0), axis=1)
    h, w = img.pixels.shape
    s = (
        c[window : window + h, window : window + w]
        - c[:h, window : window + w]
        - c[window : window + h, :w]
        + c[:h, :w]
    )
    mean = s / (window * window)
    out = np.where(img.pixels > mean - offset, 255.0, 0.0)
    return GrayImage(out)


_MOORE = [(-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1)]


def _trace_boundary(mask: np.ndarray, start: tuple[int, int]) -> list[tuple[int, int]]:
    """Moore-neighbor tracing of the outer boundary of an 8-connected region.

    ``start`` must be the topmost-leftmost region pixel. Returns (y, x)
    boundary pixels in traversal order.
    """
    h, w = mask.shape

    def on(y: int, x: int) -> bool:
        return 0 <= y < h and 0 <= x < w and mask[y, x]

    boundary = [start]
    # Backtrack starts at the pixel above the start (outside by construction).
    prev_dir = 0
    cur = start
    first_next = None
    while True:
        found = False
        for i in range(1, 9):
            d = (prev_dir + i) % 8
            ny, nx = cur[0] + _MOORE[d][0], cur[1] + _MOORE[d][1]
            if on(ny, nx):
                if cur == start and first_next is None:
                    first_next = (ny, nx)
                elif cur == start and (ny, nx) == first_next and len(boundary) > 2:
                    return boundary
                cur = (ny, nx)
                boundary.append(cur)
                prev_dir = (d + 5) % 8  # face the pixel we came from, step past it
                found = True
                break
        if not found:
            return boundary  # isolated pixel
        if len(boundary) > 4 * (h + w) * 4:
            return boundary  # safety bound


def _douglas_peucker(points: np.ndarray, eps: float) -> np.ndarray:
    """Simplify an open polyline, keeping endpoints."""
    if len(points) <= 2:
        return points
    a, b = points[0], points[-1]
    ab = b - a
    norm = np.hypot(*ab)
    if norm < 1e-12:
        d = np.hypot(*(points - a).T)
    else:
        d = np.abs(np.cross(ab, points - a)) / norm
    i = int(np.argmax(d))
    if d[i] <= eps:
        return np.array([a, b])
    left = _douglas_peucker(points[: i + 1], eps)
    right = _douglas_peucker(points[i:], eps)
    return np.vstack([left[:-1], right])


def _simplify_closed(contour: np.ndarray, eps: float) -> np.ndarray:
    """Closed-polygon Douglas-Peucker: split at the two farthest points."""
    d = np.hypot(*(contour - contour[0]).T)
    j = int(np.argmax(d))
    if j == 0:
        return contour[:1]
    first = _douglas_peucker(contour[: j + 1], eps)
    second = _douglas_peucker(np.vstack([contour[j:], contour[:1]]), eps)
    return np.vstack([first[:-1], second[:-1]])


def _polygon_area(pts: np.ndarray) -> float:
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def _is_convex_quad(pts: np.ndarray) -> bool:
    signs = []
    for i in range(4):
        a = pts[(i + 1) % 4] - pts[i]
        b = pts[(i + 2) % 4] - pts[(i + 1) % 4]
        signs.append(np.sign(np.cross(a, b)))
    return all(s > 0 for s in signs) or all(s < 0 for s in signs)


def _order_quad(pts: np.ndarray) -> np.ndarray:
    """Positive-shoelace order (y-down CCW), starting nearest the top-left."""
    if _polygon_area(pts) < 0:
        pts = pts[::-1]
    start = int(np.argmin(pts.sum(axis=1)))
    return np.roll(pts, -start, axis=0)


def find_quads(binary: GrayImage, min_side: float = 10.0) -> list[MarkerCandidate]:
    """Extract convex dark quads from a binarized image.

    Dark 8-connected regions are traced with border following and the
    boundary simplified with Douglas-Peucker (eps = 3% of the perimeter).
    Regions touching the image border are discarded, as are simplified
    polygons that are not convex 4-gons, have a side shorter than
    ``min_side``, or whose quad area disagrees with the traced contour
    area by more than 25% (rejects checkered blobs that happen to
    simplify to four corners).
    """
    dark = binary.pixels < 128.0
    labels, n = ndimage.label(dark, structure=np.ones((3, 3), dtype=np.int8))
    if n == 0:
        return []
    h, w = dark.shape
    border_labels = set(np.unique(labels[0, :])) | set(np.unique(labels[-1, :]))
    border_labels |= set(np.unique(labels[:, 0])) | set(np.unique(labels[:, -1]))
    out = []
    slices = ndimage.find_objects(labels)
    for lab in range(1, n + 1):
        if lab in border_labels:
            continue
        sl = slices[lab - 1]
        region = labels[sl] == lab
        if region.sum() < min_side * min_side * 0.5:
            continue
        ys, xs = np.nonzero(region)
        k = int(np.argmin(ys * region.shape[1] + xs))
        trace = _trace_boundary(region, (int(ys[k]), int(xs[k])))
        # Back to image coordinates, as (x, y).
        contour = np.array([(x + sl[1].start, y + sl[0].start) for y, x in trace], dtype=np.float64)
        if len(contour) < 4:
            continue
        perimeter = np.hypot(*(np.diff(np.vstack([contour, contour[:1]]), axis=0)).T).sum()
        poly = _simplify_closed(contour, 0.03 * perimeter)
        if len(poly) != 4 or not _is_convex_quad(poly):
            continue
        sides = np.hypot(*(np.roll(poly, -1, axis=0) - poly).T)
        if sides.min() < min_side:
            continue
        quad_area = abs(_polygon_area(poly))
        contour_area = abs(_polygon_area(contour))
        if quad_area <= 0 or abs(quad_area - contour_area) / quad_area > 0.25:
            continue
        out.append(MarkerCandidate(quad=_order_quad(poly)))
    out.sort(key=lambda c: (c.quad[0, 1], c.quad[0, 0]))
    return out


def decode_candidate(
    img: GrayImage,
    candidate: MarkerCandidate,
    dictionary: Dictionary,
    max_hamming: int = 2,
    border_bits: int = 1,
    cell_px: int = 8,
    border_min_dark: float = 0.7,
) -> MarkerCandidate:
    """Unwarp a quad to a canonical grid, verify the border, decode the bits.

    Returns the candidate with ``bits`` filled in, plus ``id``/``rotation``
    when the border check and dictionary match succeed; otherwise those stay
    None (rejection is not an error).
    """
    n = dictionary.bits_per_side + 2 * border_bits
    size = n * cell_px
    canon = np.array([[0.0, 0.0], [size, 0.0], [size, size], [0.0, size]])
    # Quad corners sit on pixel centers at the dark-region rim; the outer
    # cell edge lies half a pixel further out.
    H = fit_homography(canon, candidate.quad)
    gx, gy = np.meshgrid(
        (np.arange(size) + 0.5) * 1.0, (np.arange(size) + 0.5) * 1.0
    )
    pts = warp_points(H, np.column_stack([gx.ravel(), gy.ravel()]))
    patch = bilinear_sample(img.pixels, pts[:, 0], pts[:, 1], fill=255.0).reshape(size, size)
    thresh = 0.5 * (patch.min() + patch.max())
    dark = patch < thresh

    # Majority vote over the central portion of each cell.
    lo = cell_px // 4
    hi = cell_px - lo
    cells = np.zeros((n, n))
    for r in range(n):
        for c in range(n):
            block = dark[r * cell_px + lo : r * cell_px + hi, c * cell_px + lo : c * cell_px + hi]
            cells[r, c] = block.mean()
    is_dark = cells > 0.5

    ring = np.zeros((n, n), dtype=bool)
    ring[:border_bits, :] = ring[-border_bits:, :] = True
    ring[:, :border_bits] = ring[:, -border_bits:] = True
    if is_dark[ring].mean() < border_min_dark:
        return candidate
    inner = ~is_dark[border_bits : n - border_bits, border_bits : n - border_bits]
    bits = inner.astype(np.uint8)  # 1 = white cell
    match = match_marker_bits(bits, dictionary, max_hamming)
    if match is None:
        return replace(candidate, bits=bits)
    return replace(candidate, bits=bits, id=match[0], rotation=match[1])


def _marker_board_corners(spec: BoardSpec, marker_index: int) -> np.ndarray:
    """Canonical (TL, TR, BR, BL) marker corners in board square units, y down."""
    col, row = marker_square_indices(spec.squares_x, spec.squares_y)[marker_index]
    ratio = spec.marker_length / spec.square_length
    inset = (1.0 - ratio) / 2.0
    x0, y0 = col + inset, row + inset
    x1, y1 = col + 1 - inset, row + 1 - inset
    return np.array([[x0, y0], [x1, y0], [x1, y1], [x0, y1]])


def _inner_corner_board_points(spec: BoardSpec) -> list[tuple[int, float, float]]:
    """(id, u, v) inner-corner positions in board square units, y down."""
    out = []
    for cid, col, row_from_bottom in inner_corner_grid(spec):
        u = float(col + 1)
        v = float(spec.corners_y - row_from_bottom)
        out.append((cid, u, v))
    return out


def interpolate_corners(
    markers: list[MarkerCandidate],
    spec: BoardSpec,
    img: GrayImage,
    refine_marker_corners: bool = True,
) -> ChArUcoDetection:
    """Project the inner corners through a board-to-image homography.

    The homography is least-squares fitted from every decoded marker's four
    corners (board layout is known, so one marker already suffices).
    Corners projecting outside the image are dropped; classical detections
    carry confidence 1.
    """
    board_pts = []
    image_pts = []
    for cand in markers:
        if cand.id is None or cand.rotation is None:
            continue
        canon = _marker_board_corners(spec, cand.id)
        quad = cand.quad
        if refine_marker_corners:
            quad = np.array(
                [corner_subpix(img, (p[0], p[1]), half_window=3)[:2] for p in quad]
            )
        for j in range(4):
            board_pts.append(canon[j])
            # Physical clockwise rotation by r moves canonical corner j to
            # image position (j + r) mod 4.
            image_pts.append(quad[(j + cand.rotation) % 4])
    if len(board_pts) < 4:
        return ChArUcoDetection((), source="classical")
    try:
        H = fit_homography(np.array(board_pts), np.array(image_pts))
    except ValueError:
        return ChArUcoDetection((), source="classical")
    corners = []
    ids_uvs = _inner_corner_board_points(spec)
    proj = warp_points(H, np.array([(u, v) for _, u, v in ids_uvs]))
    for (cid, _, _), (x, y) in zip(ids_uvs, proj):
        if 0 <= x <= img.width - 1 and 0 <= y <= img.height - 1:
            corners.append(DetectedCorner(cid, float(x), float(y), 1.0))
    return ChArUcoDetection(tuple(corners), source="classical")


def corner_subpix(
    img: GrayImage,
    pt: tuple[float, float],
    half_window: int = 5,
    eps: float = 1e-3,
    max_iter: int = 30,
) -> tuple[float, float, bool]:
    """Saddle-point refinement via gradient normal equations.

    Solves sum(G G^T) p = sum(G G^T q) over the window around the current
    estimate, where G is the image gradient at sample q; iterates until the
    move is below ``eps`` or ``max_iter`` is hit. Returns (x, y, refined);
    a flat patch (singular normal matrix) returns the input unrefined. The
    refined point never moves more than ``half_window`` from the input.
    """
    h, w = img.pixels.shape
    x0, y0 = float(pt[0]), float(pt[1])
    offs = np.arange(-half_window, half_window + 1, dtype=np.float64)
    ox, oy = np.meshgrid(offs, offs)
    ox = ox.ravel()
    oy = oy.ravel()
    px, py = x0, y0
    refined = False
    for _ in range(max_iter):
        qx = px + ox
        qy = py + oy
        if qx.min() < 1 or qx.max() > w - 2 or qy.min() < 1 or qy.max() > h - 2:
            break
        gx = (bilinear_sample(img.pixels, qx + 1, qy) - bilinear_sample(img.pixels, qx - 1, qy)) / 2
        gy = (bilinear_sample(img.pixels, qx, qy + 1) - bilinear_sample(img.pixels, qx, qy - 1)) / 2
        a = np.sum(gx * gx)
        b = np.sum(gx * gy)
        c = np.sum(gy * gy)
        det = a * c - b * b
        scale = max(a, c)
        if scale < 1e-12 or det < 1e-9 * scale * scale:
            break
        bx = np.sum((gx * gx) * qx + (gx * gy) * qy)
        by = np.sum((gx * gy) * qx + (gy * gy) * qy)
        nx = (c * bx - b * by) / det
        ny = (a * by - b * bx) / det
        move = np.hypot(nx - px, ny - py)
        px, py = nx, ny
        refined = True
        if move < eps:
            break
    # Bound total displacement by the window radius.
    dx, dy = px - x0, py - y0
    d = np.hypot(dx, dy)
    if d > half_window:
        px = x0 + dx / d * half_window
        py = y0 + dy / d * half_window
    return float(px), float(py), refined


@dataclass(frozen=True)
class ClassicalParams:
    threshold_window: int = 23
    threshold_offset: float = 7.0
    min_side: float = 10.0
    max_hamming: int = 2
    decode_cell_px: int = 8
    border_min_dark: float = 0.7
    subpix_half_window: int = 5
    subpix_eps: float = 1e-3
    subpix_max_iter: int = 30
    refine_marker_corners: bool = True


def detect_classical(
    img: GrayImage, spec: BoardSpec, params: ClassicalParams | None = None
) -> ChArUcoDetection:
    """Full classical pipeline; returns an empty detection on failure."""
    p = params or ClassicalParams()
    binary = adaptive_threshold(img, p.threshold_window, p.threshold_offset)
    quads = find_quads(binary, p.min_side)
    decoded = [
        decode_candidate(
            img,
            q,
            spec.dictionary,
            max_hamming=p.max_hamming,
            border_bits=spec.marker_border_bits,
            cell_px=p.decode_cell_px,
            border_min_dark=p.border_min_dark,
        )
        for q in quads
    ]
    det = interpolate_corners(
        [d for d in decoded if d.id is not None], spec, img, p.refine_marker_corners
    )
    refined = []
    for c in det.corners:
        x, y, _ = corner_subpix(
            img, (c.x, c.y), p.subpix_half_window, p.subpix_eps, p.subpix_max_iter
        )
        refined.append(DetectedCorner(c.id, x, y, c.confidence))
    return ChArUcoDetection(tuple(refined), source="classical")
