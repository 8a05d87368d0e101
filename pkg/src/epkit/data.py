"""Dataset construction, IDX ingestion, PCA projection, and wedge domains.

Datasets are immutable after construction and safe to share across threads.
Pixel-style data is scaled to [0, 1] before anything downstream (attacks rely
on the box constraint).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, InvalidInput
from .numerics import RngState

__all__ = [
    "Dataset",
    "gen_gaussian_mixture",
    "toy_three_gaussians",
    "load_mnist_idx",
    "project_dataset",
    "WedgeSpec",
    "wedge_classify",
    "synthetic_digits",
]


@dataclass(frozen=True)
class Dataset:
    """Inputs (N, d), integer labels in [0, K), one-hot targets (N, K)."""

    inputs: np.ndarray
    labels: np.ndarray
    one_hot: np.ndarray
    name: str = ""

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        one_hot = np.asarray(self.one_hot, dtype=np.float64)
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "one_hot", one_hot)
        n = inputs.shape[0]
        if labels.shape != (n,) or one_hot.shape[0] != n:
            raise InvalidInput("inputs, labels, one_hot row counts disagree")
        if one_hot.shape[1] < 2:
            raise InvalidInput("one_hot needs at least two classes")
        rows = one_hot.sum(axis=1)
        if not np.allclose(rows, 1.0) or not np.all((one_hot == 0) | (one_hot == 1)):
            raise InvalidInput("one_hot rows must contain a single 1")
        if not np.array_equal(np.argmax(one_hot, axis=1), labels):
            raise InvalidInput("labels inconsistent with one_hot")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def n_classes(self) -> int:
        return self.one_hot.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.inputs[idx], self.labels[idx], self.one_hot[idx],
                       name=self.name)

    def to_csv(self, path) -> None:
        """CSV with header x0..x{d-1},label; comma separated, LF endings."""
        with open(path, "w", newline="") as fh:
            fh.write(",".join([f"x{j}" for j in range(self.dim)] + ["label"]) + "\n")
            for row, lab in zip(self.inputs, self.labels):
                fh.write(",".join(f"{v:.17g}" for v in row) + f",{lab}\n")

    @staticmethod
    def from_csv(path, n_classes=None, name="") -> "Dataset":
        raw = np.genfromtxt(path, delimiter=",", skip_header=1)
        raw = np.atleast_2d(raw)
        inputs = raw[:, :-1]
        labels = raw[:, -1].astype(np.int64)
        return make_dataset(inputs, labels, n_classes=n_classes, name=name)


def one_hot_encode(labels: np.ndarray, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def make_dataset(inputs, labels, n_classes=None, name="") -> Dataset:
    labels = np.asarray(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if labels.size else 2
    n_classes = max(n_classes, 2)
    return Dataset(inputs, labels, one_hot_encode(labels, n_classes), name=name)


def gen_gaussian_mixture(rng: RngState, means, sigma: float, per_class: int,
                         name: str = "mixture") -> Dataset:
    """per_class isotropic Gaussian draws around each mean, labeled by component.

    Label balance is exact by construction.
    """
    means = [np.asarray(m, dtype=np.float64).ravel() for m in means]
    if not means:
        raise InvalidInput("means must be non-empty")
    d = means[0].size
    if any(m.size != d for m in means):
        raise InvalidInput("all means must share one dimension")
    if sigma < 0:
        raise InvalidInput("sigma must be >= 0")
    blocks, labels = [], []
    for k, m in enumerate(means):
        noise = rng.normal(size=(per_class, d)) if sigma > 0 else 0.0
        blocks.append(m[None, :] + sigma * noise if sigma > 0 else np.tile(m, (per_class, 1)))
        labels.append(np.full(per_class, k, dtype=np.int64))
    return make_dataset(np.vstack(blocks), np.concatenate(labels),
                        n_classes=len(means), name=name)


def toy_three_gaussians(rng: RngState, dim: int = 100, per_class: int = 1000,
                        sigma: float = 1.0) -> Dataset:
    """Three well separated Gaussian classes embedded in a high-dim space.

    Means sit at (1,4,0,...), (4,1,0,...), (5,5,0,...): only the first two
    coordinates carry signal.
    """
    means = np.zeros((3, dim))
    means[0, :2] = (1.0, 4.0)
    means[1, :2] = (4.0, 1.0)
    means[2, :2] = (5.0, 5.0)
    return gen_gaussian_mixture(rng, list(means), sigma, per_class, name="toy3")


# ---------------------------------------------------------------------------
# IDX ingestion (big-endian, magic 2051 images / 2049 labels)
# ---------------------------------------------------------------------------


def _read_idx_images(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise FormatError("image file truncated before header", byte_offset=len(blob))
    magic, count, rows, cols = struct.unpack(">IIII", blob[:16])
    if magic != 0x00000803:
        raise FormatError(f"bad image magic 0x{magic:08x}, expected 0x00000803",
                          byte_offset=0)
    expected = 16 + count * rows * cols
    if len(blob) != expected:
        raise FormatError(
            f"image payload is {len(blob) - 16} bytes, expected {count * rows * cols}",
            byte_offset=min(len(blob), expected))
    pixels = np.frombuffer(blob, dtype=np.uint8, offset=16)
    return pixels.reshape(count, rows * cols), rows, cols


def _read_idx_labels(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise FormatError("label file truncated before header", byte_offset=len(blob))
    magic, count = struct.unpack(">II", blob[:8])
    if magic != 0x00000801:
        raise FormatError(f"bad label magic 0x{magic:08x}, expected 0x00000801",
                          byte_offset=0)
    if len(blob) != 8 + count:
        raise FormatError(f"label payload is {len(blob) - 8} bytes, expected {count}",
                          byte_offset=min(len(blob), 8 + count))
    return np.frombuffer(blob, dtype=np.uint8, offset=8)


def load_mnist_idx(images_path, labels_path, name: str = "mnist") -> Dataset:
    """Parse an IDX image/label pair into a dataset scaled to [0, 1]."""
    pixels, rows, cols = _read_idx_images(images_path)
    labels = _read_idx_labels(labels_path)
    if labels.shape[0] != pixels.shape[0]:
        raise FormatError(
            f"{pixels.shape[0]} images but {labels.shape[0]} labels", byte_offset=8)
    inputs = pixels.astype(np.float64) / 255.0
    return make_dataset(inputs, labels.astype(np.int64), n_classes=10, name=name)


def projector(components: np.ndarray) -> np.ndarray:
    """P = W.T @ W for orthonormal rows W."""
    components = np.asarray(components, dtype=np.float64)
    return components.T @ components


def project_dataset(ds: Dataset, components: np.ndarray) -> Dataset:
    """Replace inputs by their projection x @ W.T @ W onto span(W).

    Components rows must be orthonormal so the projection is idempotent.
    """
    components = np.asarray(components, dtype=np.float64)
    if components.ndim != 2 or components.shape[1] != ds.dim:
        raise InvalidInput(
            f"components shape {components.shape} incompatible with data dim {ds.dim}")
    gram = components @ components.T
    if not np.allclose(gram, np.eye(components.shape[0]), atol=1e-8):
        raise InvalidInput("component rows must be orthonormal")
    projected = (ds.inputs @ components.T) @ components
    return Dataset(projected, ds.labels, ds.one_hot, name=f"{ds.name}-proj{components.shape[0]}")


# ---------------------------------------------------------------------------
# Wedge domains: analytic classifiers with closed-form stability
# ---------------------------------------------------------------------------

WEDGE_INSIDE = 1
WEDGE_OUTSIDE = 0


@dataclass(frozen=True)
class WedgeSpec:
    """Conical wedge in R^n bounded by k sheets.

    With no angles this is the axis-aligned orthant {x_1 > 0, ..., x_k > 0}.
    Angles theta_1..theta_{k-1} in (0, pi/2) tilt sheets 2..k against the
    first coordinate: sheet i requires x_i > x_1 * tan(theta_{i-1}).
    """

    n: int
    k: int
    angles: tuple = ()

    def __post_init__(self):
        if not 1 <= self.k <= self.n:
            raise InvalidInput("need 1 <= k <= n")
        angles = tuple(float(a) for a in self.angles)
        object.__setattr__(self, "angles", angles)
        if angles and len(angles) != self.k - 1:
            raise InvalidInput("angled wedge needs k-1 angles")
        if any(not 0.0 < a < np.pi / 2 for a in angles):
            raise InvalidInput("angles must lie in (0, pi/2)")


def wedge_classify(spec: WedgeSpec, x: np.ndarray) -> int:
    """Exact membership; boundary points are strictly outside."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size != spec.n:
        raise InvalidInput(f"point has dimension {x.size}, expected {spec.n}")
    if x[0] <= 0.0:
        return WEDGE_OUTSIDE
    if not spec.angles:
        return WEDGE_INSIDE if np.all(x[:spec.k] > 0.0) else WEDGE_OUTSIDE
    for i in range(1, spec.k):
        if x[i] <= x[0] * np.tan(spec.angles[i - 1]):
            return WEDGE_OUTSIDE
    return WEDGE_INSIDE


def wedge_classify_batch(spec: WedgeSpec, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != spec.n:
        raise InvalidInput(f"points have dimension {X.shape[1]}, expected {spec.n}")
    inside = X[:, 0] > 0.0
    if not spec.angles:
        for i in range(1, spec.k):
            inside &= X[:, i] > 0.0
    else:
        for i in range(1, spec.k):
            inside &= X[:, i] > X[:, 0] * np.tan(spec.angles[i - 1])
    return inside.astype(np.int64)


# ---------------------------------------------------------------------------
# Synthetic 28x28 digit corpus (desk-scale stand-in for handwritten digits)
# ---------------------------------------------------------------------------

# Stroke skeletons on a unit box: each digit is a list of segments
# ((x0, y0), (x1, y1)) in [0, 1]^2, x right, y up.
_DIGIT_STROKES = {
    0: [((0.25, 0.15), (0.25, 0.85)), ((0.75, 0.15), (0.75, 0.85)),
        ((0.25, 0.85), (0.75, 0.85)), ((0.25, 0.15), (0.75, 0.15))],
    1: [((0.5, 0.1), (0.5, 0.9)), ((0.35, 0.72), (0.5, 0.9))],
    2: [((0.25, 0.85), (0.75, 0.85)), ((0.75, 0.85), (0.75, 0.5)),
        ((0.75, 0.5), (0.25, 0.15)), ((0.25, 0.15), (0.78, 0.15))],
    3: [((0.25, 0.85), (0.75, 0.85)), ((0.75, 0.85), (0.75, 0.15)),
        ((0.25, 0.15), (0.75, 0.15)), ((0.35, 0.5), (0.75, 0.5))],
    4: [((0.3, 0.9), (0.25, 0.45)), ((0.25, 0.45), (0.78, 0.45)),
        ((0.68, 0.7), (0.68, 0.1))],
    5: [((0.75, 0.85), (0.25, 0.85)), ((0.25, 0.85), (0.25, 0.52)),
        ((0.25, 0.52), (0.72, 0.52)), ((0.72, 0.52), (0.72, 0.15)),
        ((0.72, 0.15), (0.25, 0.15))],
    6: [((0.68, 0.88), (0.3, 0.5)), ((0.3, 0.5), (0.3, 0.18)),
        ((0.3, 0.18), (0.7, 0.18)), ((0.7, 0.18), (0.7, 0.48)),
        ((0.7, 0.48), (0.3, 0.48))],
    7: [((0.22, 0.85), (0.78, 0.85)), ((0.78, 0.85), (0.42, 0.1))],
    8: [((0.3, 0.5), (0.3, 0.85)), ((0.3, 0.85), (0.7, 0.85)),
        ((0.7, 0.85), (0.7, 0.5)), ((0.28, 0.5), (0.72, 0.5)),
        ((0.28, 0.5), (0.28, 0.15)), ((0.28, 0.15), (0.72, 0.15)),
        ((0.72, 0.15), (0.72, 0.5))],
    9: [((0.7, 0.52), (0.3, 0.52)), ((0.3, 0.52), (0.3, 0.82)),
        ((0.3, 0.82), (0.7, 0.82)), ((0.7, 0.82), (0.7, 0.2)),
        ((0.7, 0.2), (0.4, 0.12))],
}


def _render_strokes(strokes, px, py, thicknesses, softness):
    img = np.zeros_like(px)
    for ((x0, y0), (x1, y1)), thick in zip(strokes, thicknesses):
        dx, dy = x1 - x0, y1 - y0
        denom = dx * dx + dy * dy
        if denom == 0:
            t = np.zeros_like(px)
        else:
            t = np.clip(((px - x0) * dx + (py - y0) * dy) / denom, 0.0, 1.0)
        dist = np.hypot(px - (x0 + t * dx), py - (y0 + t * dy))
        img = np.maximum(img, 1.0 / (1.0 + np.exp((dist - thick) / softness)))
    return img


def _warp_field(coeffs, px, py):
    """Bilinear displacement field from a 3x3 control grid over [0, 1]^2."""
    gx = np.clip(px * 2.0, 0.0, 2.0)
    gy = np.clip(py * 2.0, 0.0, 2.0)
    ix = np.minimum(gx.astype(np.int64), 1)
    iy = np.minimum(gy.astype(np.int64), 1)
    fx = gx - ix
    fy = gy - iy
    out = np.zeros((2,) + px.shape)
    for axis in range(2):
        c = coeffs[axis]
        out[axis] = (c[iy, ix] * (1 - fx) * (1 - fy) +
                     c[iy, ix + 1] * fx * (1 - fy) +
                     c[iy + 1, ix] * (1 - fx) * fy +
                     c[iy + 1, ix + 1] * fx * fy)
    return out


def synthetic_digits(rng: RngState, n: int, side: int = 28,
                     noise: float = 0.06, name: str = "digits") -> Dataset:
    """Procedurally rendered digit images in [0, 1]^(side*side).

    Each sample draws a digit skeleton and randomizes an affine pose
    (shift, rotation, scale, shear), per-stroke endpoint jitter and
    thickness, a smooth warp field over the canvas, contrast, and pixel
    noise, giving each class several dozen independent modes of variation.
    Serves as a reproducible desk-scale substitute for handwritten digit
    corpora in tests and demos.
    """
    labels = rng.integers(0, 10, size=n)
    params = rng.uniform(size=(n, 8))
    stroke_jit = rng.normal(size=(n, 16, 4))     # up to 16 strokes, 2 endpoints
    thick_jit = rng.uniform(size=(n, 16))
    warp_coef = rng.normal(size=(n, 2, 3, 3))
    pix_noise = rng.normal(size=(n, side * side))
    ys, xs = np.mgrid[0:side, 0:side]
    base_px = (xs + 0.5) / side
    base_py = 1.0 - (ys + 0.5) / side
    images = np.empty((n, side * side))
    for i in range(n):
        digit = int(labels[i])
        angle = (params[i, 0] - 0.5) * (np.pi / 7.5)  # about +-12 degrees
        scale = 0.85 + 0.3 * params[i, 1]
        shear = (params[i, 2] - 0.5) * 0.35
        tx = (params[i, 3] - 0.5) * 0.14
        ty = (params[i, 4] - 0.5) * 0.14
        base_thick = 0.04 + 0.045 * params[i, 5]
        softness = 0.012 + 0.012 * params[i, 6]
        contrast = 0.82 + 0.18 * params[i, 7]
        ca, sa = np.cos(angle), np.sin(angle)
        strokes = []
        for s_idx, ((x0, y0), (x1, y1)) in enumerate(_DIGIT_STROKES[digit]):
            pts = []
            for e_idx, (x, y) in enumerate(((x0, y0), (x1, y1))):
                u = x - 0.5 + 0.022 * stroke_jit[i, s_idx, 2 * e_idx]
                v = y - 0.5 + 0.022 * stroke_jit[i, s_idx, 2 * e_idx + 1]
                u, v = u + shear * v, v
                u, v = scale * (ca * u - sa * v), scale * (sa * u + ca * v)
                pts.append((u + 0.5 + tx, v + 0.5 + ty))
            strokes.append((pts[0], pts[1]))
        thicknesses = base_thick * (0.8 + 0.4 * thick_jit[i, :len(strokes)])
        warp = _warp_field(0.016 * warp_coef[i], base_px, base_py)
        px = base_px + warp[0]
        py = base_py + warp[1]
        img = contrast * _render_strokes(strokes, px, py, thicknesses, softness)
        images[i] = img.ravel()
    if noise > 0:
        images = images + noise * pix_noise
    np.clip(images, 0.0, 1.0, out=images)
    return make_dataset(images, labels, n_classes=10, name=name)
