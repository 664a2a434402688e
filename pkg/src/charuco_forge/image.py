"""Grayscale raster container, PGM I/O, convolution, warping, augmentation.

Pixels are stored as float64 in [0, 255] and quantized to 8 bits only at
I/O boundaries. All operations return new images; inputs are never
mutated.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

__all__ = [
    "GrayImage",
    "Homography",
    "AugmentConfig",
    "ShadowSpotlightParams",
    "PgmError",
    "read_pgm",
    "write_pgm",
    "convolve2d",
    "fit_homography",
    "warp_homography",
    "warp_points",
    "apply_motion_blur",
    "apply_brightness",
    "add_gaussian_noise",
    "add_speckle",
    "gaussian_blur",
    "shadow_gain_field",
    "apply_shadow_spotlight",
    "sample_augment_homography",
    "augment",
]


class PgmError(ValueError):
    """Raised for malformed PGM files."""


@dataclass(frozen=True)
class GrayImage:
    """Immutable grayscale raster; row-major float pixels in [0, 255]."""

    pixels: np.ndarray

    def __post_init__(self) -> None:
        p = np.ascontiguousarray(self.pixels, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
            raise ValueError(f"pixels must be a 2D array, got shape {p.shape}")
        p.setflags(write=False)
        object.__setattr__(self, "pixels", p)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def quantized(self) -> np.ndarray:
        """8-bit view used at I/O boundaries (round half away from zero)."""
        return np.clip(np.floor(self.pixels + 0.5), 0, 255).astype(np.uint8)


def read_pgm(path: str | Path) -> GrayImage:
    """Read a binary (P5) 8-bit PGM file."""
    data = Path(path).read_bytes()
    pos = 0

    def token() -> bytes:
        nonlocal pos
        while pos < len(data):
            if data[pos : pos + 1].isspace():
                pos += 1
            elif data[pos : pos + 1] == b"#":
                while pos < len(data) and data[pos] != 0x0A:
                    pos += 1
            else:
                break
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PgmError(f"{path}: truncated header")
        return data[start:pos]

    magic = token()
    if magic != b"P5":
        raise PgmError(f"{path}: unsupported PGM variant {magic!r} (only binary P5)")
    try:
        width = int(token())
        height = int(token())
        maxval = int(token())
    except ValueError as exc:
        raise PgmError(f"{path}: non-numeric header field") from exc
    if maxval != 255:
        raise PgmError(f"{path}: unsupported maxval {maxval} (only 255)")
    if width < 1 or height < 1:
        raise PgmError(f"{path}: invalid dimensions {width}x{height}")
    pos += 1  # single whitespace byte after maxval
    payload = data[pos : pos + width * height]
    if len(payload) < width * height:
        raise PgmError(f"{path}: truncated payload ({len(payload)} of {width * height} bytes)")
    pix = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return GrayImage(pix.astype(np.float64))


def write_pgm(img: GrayImage, path: str | Path) -> None:
    """Write a binary (P5) 8-bit PGM file."""
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + img.quantized().tobytes())


def convolve2d(img: GrayImage, kernel: np.ndarray, border: str = "replicate") -> GrayImage:
    """2D correlation (no kernel flip) with replicate border handling."""
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2 or kernel.shape[0] != kernel.shape[1]:
        raise ValueError(f"kernel must be square, got shape {kernel.shape}")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ValueError(f"kernel size {k} must be odd")
    if border != "replicate":
        raise ValueError(f"unsupported border mode {border!r}")
    r = k // 2
    src = np.pad(img.pixels, r, mode="edge")
    h, w = img.pixels.shape
    out = np.zeros((h, w), dtype=np.float64)
    for dy in range(k):
        for dx in range(k):
            if kernel[dy, dx] != 0.0:
                out += kernel[dy, dx] * src[dy : dy + h, dx : dx + w]
    return GrayImage(out)


@dataclass(frozen=True)
class Homography:
    """3x3 projective transform; normalized so the bottom-right entry is 1."""

    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {m.shape}")
        if abs(np.linalg.det(m)) <= 1e-12:
            raise ValueError("homography is singular")
        if m[2, 2] != 0.0:
            m = m / m[2, 2]
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def __matmul__(self, other: "Homography") -> "Homography":
        return Homography(self.matrix @ other.matrix)


def warp_points(H: Homography, pts: np.ndarray) -> np.ndarray:
    """Map (n, 2) points through a homography."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    hom = np.hstack([pts, np.ones((len(pts), 1))]) @ H.matrix.T
    return hom[:, :2] / hom[:, 2:3]


def fit_homography(src: np.ndarray, dst: np.ndarray) -> Homography:
    """Least-squares DLT homography mapping src -> dst (n >= 4 points).

    Both point sets are Hartley-normalized before assembling the design
    matrix, which keeps the estimate stable for pixel-scale coordinates.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if len(src) != len(dst) or len(src) < 4:
        raise ValueError(f"need >= 4 point pairs, got {len(src)} and {len(dst)}")

    def normalizer(p: np.ndarray) -> np.ndarray:
        c = p.mean(axis=0)
        d = np.sqrt(((p - c) ** 2).sum(axis=1)).mean()
        s = np.sqrt(2.0) / d if d > 1e-12 else 1.0
        return np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])

    Ts, Td = normalizer(src), normalizer(dst)
    sn = np.hstack([src, np.ones((len(src), 1))]) @ Ts.T
    dn = np.hstack([dst, np.ones((len(dst), 1))]) @ Td.T
    A = np.zeros((2 * len(src), 9))
    for i in range(len(src)):
        x, y, _ = sn[i]
        u, v, _ = dn[i]
        A[2 * i] = [-x, -y, -1, 0, 0, 0, u * x, u * y, u]
        A[2 * i + 1] = [0, 0, 0, -x, -y, -1, v * x, v * y, v]
    _, s, vt = np.linalg.svd(A)
    if s[-2] < 1e-10 * s[0]:
        raise ValueError("degenerate point configuration for homography fit")
    H = vt[-1].reshape(3, 3)
    return Homography(np.linalg.inv(Td) @ H @ Ts)


def bilinear_sample(pixels: np.ndarray, x: np.ndarray, y: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Sample an image at float positions; out-of-bounds reads return fill."""
    h, w = pixels.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    out = np.full(x.shape, fill, dtype=np.float64)
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    x0v = np.clip(x0[valid], 0, w - 1)
    y0v = np.clip(y0[valid], 0, h - 1)
    x1v = np.clip(x0v + 1, 0, w - 1)
    y1v = np.clip(y0v + 1, 0, h - 1)
    fxv = fx[valid]
    fyv = fy[valid]
    top = pixels[y0v, x0v] * (1 - fxv) + pixels[y0v, x1v] * fxv
    bot = pixels[y1v, x0v] * (1 - fxv) + pixels[y1v, x1v] * fxv
    out[valid] = top * (1 - fyv) + bot * fyv
    return out


def warp_homography(img: GrayImage, H: Homography, out_size: tuple[int, int]) -> GrayImage:
    """Warp with inverse-mapped bilinear sampling; out-of-bounds reads 0."""
    out_w, out_h = out_size
    inv = H.inverse().matrix
    xs, ys = np.meshgrid(np.arange(out_w, dtype=np.float64), np.arange(out_h, dtype=np.float64))
    denom = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    sx = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / denom
    sy = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / denom
    return GrayImage(bilinear_sample(img.pixels, sx, sy, fill=0.0))


def apply_motion_blur(img: GrayImage, k: int) -> GrayImage:
    """Horizontal box blur of width k (normalized); k <= 1 is the identity."""
    if k < 0:
        raise ValueError("kernel size must be >= 0")
    if k <= 1:
        return img
    left = (k - 1) // 2
    right = k - 1 - left
    src = np.pad(img.pixels, ((0, 0), (left, right)), mode="edge")
    csum = np.cumsum(np.pad(src, ((0, 0), (1, 0))), axis=1)
    out = (csum[:, k:] - csum[:, :-k]) / k
    return GrayImage(out)


def apply_brightness(img: GrayImage, factor: float) -> GrayImage:
    """Multiply intensities by a non-negative factor, clamped to [0, 255]."""
    if factor < 0:
        raise ValueError("brightness factor must be >= 0")
    return GrayImage(np.clip(img.pixels * factor, 0.0, 255.0))


def add_gaussian_noise(img: GrayImage, sigma: float, rng: np.random.Generator) -> GrayImage:
    """Add i.i.d. N(0, sigma^2) noise, then clamp to [0, 255]."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return img
    noisy = img.pixels + rng.normal(0.0, sigma, img.pixels.shape)
    return GrayImage(np.clip(noisy, 0.0, 255.0))


def add_speckle(img: GrayImage, density: float, rng: np.random.Generator) -> GrayImage:
    """Salt-and-pepper: each pixel goes to 0 or 255 with probability density/2 each."""
    if not 0.0 <= density <= 1.0:
        raise ValueError("density must be in [0, 1]")
    if density == 0:
        return img
    u = rng.random(img.pixels.shape)
    out = img.pixels.copy()
    out[u < density / 2] = 0.0
    out[(u >= density / 2) & (u < density)] = 255.0
    return GrayImage(out)


def _gaussian_kernel1d(sigma: float) -> np.ndarray:
    radius = max(1, int(np.ceil(3.0 * sigma)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_blur(img: GrayImage, sigma: float) -> GrayImage:
    """Separable Gaussian blur, kernel truncated at 3 sigma."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return img
    k = _gaussian_kernel1d(sigma)
    r = len(k) // 2
    src = np.pad(img.pixels, ((0, 0), (r, r)), mode="edge")
    tmp = np.zeros_like(img.pixels)
    for i, kv in enumerate(k):
        tmp += kv * src[:, i : i + img.width]
    src = np.pad(tmp, ((r, r), (0, 0)), mode="edge")
    out = np.zeros_like(img.pixels)
    for i, kv in enumerate(k):
        out += kv * src[i : i + img.height, :]
    return GrayImage(out)


@dataclass(frozen=True)
class ShadowSpotlightParams:
    """Elliptical multiplicative gain field with Gaussian falloff.

    gain < 1 darkens (shadow), gain > 1 brightens (spotlight); gain == 1 is
    the identity. The field is ``1 + (gain - 1) * exp(-d^2 / 2)`` where d is
    the rotated elliptical distance from the center in units of the
    half-axes.
    """

    center: tuple[float, float]
    axes: tuple[float, float]
    angle: float
    gain: float


def shadow_gain_field(shape: tuple[int, int], params: ShadowSpotlightParams) -> np.ndarray:
    h, w = shape
    xs, ys = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    dx = xs - params.center[0]
    dy = ys - params.center[1]
    c, s = np.cos(params.angle), np.sin(params.angle)
    u = (c * dx + s * dy) / max(params.axes[0], 1e-9)
    v = (-s * dx + c * dy) / max(params.axes[1], 1e-9)
    d2 = u * u + v * v
    return 1.0 + (params.gain - 1.0) * np.exp(-0.5 * d2)


def apply_shadow_spotlight(
    img: GrayImage,
    params: ShadowSpotlightParams | None = None,
    rng: np.random.Generator | None = None,
    spotlight_prob: float = 0.5,
) -> GrayImage:
    """Apply an elliptical shadow or spotlight; params sampled from rng if omitted."""
    if params is None:
        if rng is None:
            raise ValueError("either params or rng must be given")
        h, w = img.pixels.shape
        if rng.random() < spotlight_prob:
            gain = rng.uniform(1.2, 2.0)
        else:
            gain = rng.uniform(0.2, 0.8)
        params = ShadowSpotlightParams(
            center=(rng.uniform(0, w - 1), rng.uniform(0, h - 1)),
            axes=(rng.uniform(0.2, 0.6) * w, rng.uniform(0.2, 0.6) * h),
            angle=rng.uniform(0, np.pi),
            gain=gain,
        )
    field = shadow_gain_field(img.pixels.shape, params)
    return GrayImage(np.clip(img.pixels * field, 0.0, 255.0))


@dataclass(frozen=True)
class AugmentConfig:
    """Per-effect probabilities and magnitude ranges for frame augmentation.

    Defaults follow the training-time distortion schedule: noise, motion
    blur, speckle, brightness and shadow/spotlight at 0.5, Gaussian blur at
    0.25, and a homographic transform always applied to positive frames
    (never to negatives).
    """

    p_gaussian_noise: float = 0.5
    p_motion_blur: float = 0.5
    p_gaussian_blur: float = 0.25
    p_speckle: float = 0.5
    p_brightness: float = 0.5
    p_shadow_spotlight: float = 0.5
    p_homography: float = 1.0
    noise_sigma: tuple[float, float] = (2.0, 12.0)
    motion_blur_k: tuple[int, int] = (3, 10)
    gaussian_blur_sigma: tuple[float, float] = (0.5, 2.0)
    speckle_density: tuple[float, float] = (0.01, 0.08)
    brightness_factor: tuple[float, float] = (0.3, 1.4)
    corner_jitter_frac: float = 0.2
    seed: int | None = None

    def __post_init__(self) -> None:
        for name in (
            "p_gaussian_noise",
            "p_motion_blur",
            "p_gaussian_blur",
            "p_speckle",
            "p_brightness",
            "p_shadow_spotlight",
            "p_homography",
        ):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name}={p} outside [0, 1]")

    @classmethod
    def negatives(cls, **kwargs) -> "AugmentConfig":
        """Schedule for frames without the target board (no homography)."""
        return cls(p_homography=0.0, **kwargs)

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(
            p_gaussian_noise=0.0,
            p_motion_blur=0.0,
            p_gaussian_blur=0.0,
            p_speckle=0.0,
            p_brightness=0.0,
            p_shadow_spotlight=0.0,
            p_homography=0.0,
        )


def sample_augment_homography(
    rng: np.random.Generator,
    size: tuple[int, int],
    corners: np.ndarray | None = None,
    jitter_frac: float = 0.2,
    max_tries: int = 50,
) -> Homography:
    """Sample a random perspective warp by displacing the image corners.

    Each corner moves uniformly within ±jitter_frac of the image dimensions.
    Samples are rejected while near-singular or while they would push every
    tracked corner out of frame.
    """
    w, h = size
    base = np.array([[0.0, 0.0], [w - 1.0, 0.0], [w - 1.0, h - 1.0], [0.0, h - 1.0]])
    for _ in range(max_tries):
        jitter = rng.uniform(-1.0, 1.0, (4, 2)) * np.array([jitter_frac * w, jitter_frac * h])
        try:
            H = fit_homography(base, base + jitter)
        except ValueError:
            continue
        if abs(np.linalg.det(H.matrix)) < 1e-6:
            continue
        if corners is not None and len(corners):
            mapped = warp_points(H, corners)
            inside = (
                (mapped[:, 0] >= 0)
                & (mapped[:, 0] <= w - 1)
                & (mapped[:, 1] >= 0)
                & (mapped[:, 1] <= h - 1)
            )
            if not inside.any():
                continue
        return H
    return Homography(np.eye(3))


_EFFECT_NAMES = (
    "gaussian_noise",
    "motion_blur",
    "gaussian_blur",
    "speckle",
    "brightness",
    "shadow_spotlight",
    "homography",
)


def augment(
    img: GrayImage,
    corners: list[tuple[int, float, float]],
    cfg: AugmentConfig,
    rng: np.random.Generator | None = None,
) -> tuple[GrayImage, list[tuple[int, float, float]], list[str]]:
    """Apply the configured random distortions in a random order.

    Each effect fires independently with its configured probability; the
    application order is shuffled per frame. The homography transforms the
    corner list consistently and corners leaving the frame are dropped.
    Returns (image, surviving corners, applied effect names in order).
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    probs = {
        "gaussian_noise": cfg.p_gaussian_noise,
        "motion_blur": cfg.p_motion_blur,
        "gaussian_blur": cfg.p_gaussian_blur,
        "speckle": cfg.p_speckle,
        "brightness": cfg.p_brightness,
        "shadow_spotlight": cfg.p_shadow_spotlight,
        "homography": cfg.p_homography,
    }
    # One uniform draw per effect, in fixed order, keeps application
    # frequencies independent of what other effects did.
    chosen = [name for name in _EFFECT_NAMES if rng.random() < probs[name]]
    order = list(chosen)
    rng.shuffle(order)

    out = img
    pts = list(corners)
    for name in order:
        if name == "gaussian_noise":
            out = add_gaussian_noise(out, rng.uniform(*cfg.noise_sigma), rng)
        elif name == "motion_blur":
            out = apply_motion_blur(out, int(rng.integers(cfg.motion_blur_k[0], cfg.motion_blur_k[1] + 1)))
        elif name == "gaussian_blur":
            out = gaussian_blur(out, rng.uniform(*cfg.gaussian_blur_sigma))
        elif name == "speckle":
            out = add_speckle(out, rng.uniform(*cfg.speckle_density), rng)
        elif name == "brightness":
            out = apply_brightness(out, rng.uniform(*cfg.brightness_factor))
        elif name == "shadow_spotlight":
            out = apply_shadow_spotlight(out, rng=rng)
        elif name == "homography":
            coords = np.array([(x, y) for _, x, y in pts]) if pts else None
            H = sample_augment_homography(
                rng, (out.width, out.height), coords, cfg.corner_jitter_frac
            )
            out = warp_homography(out, H, (out.width, out.height))
            if pts:
                mapped = warp_points(H, coords)
                kept = []
                for (cid, _, _), (mx, my) in zip(pts, mapped):
                    if 0 <= mx <= out.width - 1 and 0 <= my <= out.height - 1:
                        kept.append((cid, float(mx), float(my)))
                pts = kept
    return out, pts, order
