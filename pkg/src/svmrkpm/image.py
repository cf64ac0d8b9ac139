"""Raster image handling: loading, synthetic generation, Otsu labeling.

Images are d-dimensional intensity rasters (d = 1 or 2) with square pixels
of physical size ``voxel_size``. ``origin`` holds the physical coordinates
of the *first pixel centroid*; pixel ``(i, j)`` sits at
``origin + (i, j) * voxel_size``. Flattened enumerations (training sets,
label vectors) run with the first axis fastest, i.e. raster order with x
varying fastest.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

__all__ = [
    "ImageGrid",
    "LabelGrid",
    "LabeledDataset",
    "SyntheticTruth",
    "load_image",
    "write_image",
    "otsu_threshold",
    "make_training_set",
    "synth_image",
]

OTSU_BINS = 256


@dataclass(frozen=True)
class ImageGrid:
    """Intensity raster with physical placement.

    intensities has shape ``dims`` (axis k of the array is physical axis k)
    and values in [0, 1].
    """

    dims: tuple[int, ...]
    voxel_size: float
    origin: tuple[float, ...]
    intensities: np.ndarray

    def __post_init__(self):
        if any(n < 1 for n in self.dims):
            raise ValueError("all image extents must be >= 1")
        if self.voxel_size <= 0:
            raise ValueError("voxel size must be positive")
        if len(self.origin) != len(self.dims):
            raise ValueError("origin dimension mismatch")
        arr = np.asarray(self.intensities, dtype=float)
        if arr.shape != self.dims:
            raise ValueError(
                f"intensity count {arr.size} does not match extents {self.dims}"
            )
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("intensities outside [0, 1]")
        object.__setattr__(self, "intensities", arr)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    def centroids(self) -> np.ndarray:
        """Physical pixel centroids, shape (npixels, d), first axis fastest."""
        axes = [
            self.origin[k] + self.voxel_size * np.arange(self.dims[k])
            for k in range(self.ndim)
        ]
        grids = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel(order="F") for g in grids], axis=1)

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical rectangle covered by the pixels (lo, hi corners)."""
        lo = np.asarray(self.origin) - 0.5 * self.voxel_size
        hi = lo + self.voxel_size * np.asarray(self.dims)
        return lo, hi


@dataclass(frozen=True)
class LabelGrid:
    """Per-pixel class labels, -1 (matrix) or +1 (inclusion)."""

    dims: tuple[int, ...]
    labels: np.ndarray
    threshold: float = float("nan")

    def __post_init__(self):
        arr = np.asarray(self.labels)
        if arr.shape != self.dims:
            raise ValueError("label extents do not match image extents")
        if not np.isin(arr, (-1, 1)).all():
            raise ValueError("labels must be -1 or +1")
        object.__setattr__(self, "labels", arr.astype(int))


@dataclass(frozen=True)
class LabeledDataset:
    """Point/label pairs used to train the classifier."""

    points: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        pts = np.atleast_2d(np.asarray(self.points, dtype=float))
        lab = np.asarray(self.labels, dtype=int)
        if pts.shape[0] != lab.shape[0]:
            raise ValueError("points/labels length mismatch")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "labels", lab)

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def ndim(self) -> int:
        return self.points.shape[1]

    def require_both_classes(self):
        if not ((self.labels == 1).any() and (self.labels == -1).any()):
            raise ValueError("training requires both classes present")


@dataclass(frozen=True)
class SyntheticTruth:
    """Ground-truth circular inclusions in an L x L domain."""

    circles: tuple[tuple[tuple[float, float], float], ...]
    extent: float

    def __post_init__(self):
        if len(self.circles) < 1:
            raise ValueError("at least one circle required")
        if any(r <= 0 for _, r in self.circles):
            raise ValueError("all radii must be positive")

    @property
    def count(self) -> int:
        return len(self.circles)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        """Boolean inclusion membership for points, shape (n, 2)."""
        pts = np.atleast_2d(pts)
        inside = np.zeros(len(pts), dtype=bool)
        for (cx, cy), r in self.circles:
            d2 = (pts[:, 0] - cx) ** 2 + (pts[:, 1] - cy) ** 2
            inside |= d2 <= r * r
        return inside

    def radial_errors(self, pts: np.ndarray) -> np.ndarray:
        """Distance of each point to its nearest circle boundary (signed by
        |dist to center| - R of the owning circle)."""
        pts = np.atleast_2d(pts)
        errs = np.full(len(pts), np.inf)
        for (cx, cy), r in self.circles:
            e = np.hypot(pts[:, 0] - cx, pts[:, 1] - cy) - r
            pick = np.abs(e) < np.abs(errs)
            errs[pick] = e[pick]
        return errs


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

_RAW_DTYPES = {
    "uint8": np.uint8,
    "uint16": np.uint16,
    "float32": np.float32,
    "float64": np.float64,
}


def _parse_pgm(data: bytes) -> tuple[int, int, int, np.ndarray]:
    if data[:2] not in (b"P2", b"P5"):
        raise ValueError("malformed header: not a P2/P5 PGM file")
    magic = data[:2].decode()

    # Header tokens may be interleaved with '#' comments.
    tokens = []
    pos = 2
    while len(tokens) < 3:
        m = re.compile(rb"\s*(#[^\n]*\n|\S+)").match(data, pos)
        if m is None:
            raise ValueError("malformed header: truncated PGM header")
        pos = m.end()
        tok = m.group(1)
        if not tok.startswith(b"#"):
            tokens.append(tok)
    try:
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ValueError("malformed header: non-integer PGM header field") from exc
    if maxval <= 0 or maxval > 65535:
        raise ValueError(f"unsupported bit depth: maxval {maxval}")

    if magic == "P2":
        try:
            vals = np.array(data[pos:].split(), dtype=np.int64)
        except ValueError as exc:
            raise ValueError("malformed header: non-numeric P2 payload") from exc
    else:
        pos += 1  # single whitespace byte after maxval
        payload = data[pos:]
        if maxval < 256:
            vals = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)
        else:
            if len(payload) % 2:
                raise ValueError("payload length mismatch")
            vals = np.frombuffer(payload, dtype=">u2").astype(np.int64)
    if vals.size != width * height:
        raise ValueError("payload length mismatch")
    return width, height, maxval, vals


def load_image(path, fmt: str | None = None, voxel_size: float = 1.0,
               origin: tuple[float, ...] | None = None) -> ImageGrid:
    """Load a raster image from disk.

    Supported formats: ``pgm`` (P2/P5, maxval <= 65535), ``raw`` (little-endian
    payload plus a ``<path>.yaml`` sidecar carrying dims/voxel_size/origin/
    dtype) and ``csv`` (one intensity per line, d = 1). Integer payloads are
    divided by their maximum representable value; the result always lies in
    [0, 1]. ``voxel_size``/``origin`` apply to the sidecar-less formats.
    """
    path = Path(path)
    if fmt is None:
        fmt = {".pgm": "pgm", ".raw": "raw", ".csv": "csv"}.get(path.suffix.lower())
        if fmt is None:
            raise ValueError(f"cannot infer format of {path}")
    if not path.exists():
        raise FileNotFoundError(f"image file not found: {path}")

    if fmt == "pgm":
        width, height, maxval, vals = _parse_pgm(path.read_bytes())
        if vals.min() < 0 or vals.max() > maxval:
            raise ValueError("pixel value exceeds declared maxval")
        # Raster runs rows (y) outer / columns (x) inner; store as [x, y].
        arr = (vals.astype(float) / maxval).reshape(height, width).T
        dims = (width, height)
    elif fmt == "raw":
        sidecar = path.with_suffix(path.suffix + ".yaml")
        if not sidecar.exists():
            raise FileNotFoundError(f"raw sidecar not found: {sidecar}")
        meta = yaml.safe_load(sidecar.read_text())
        try:
            dims = tuple(int(n) for n in meta["dims"])
            dtype_name = meta["dtype"]
            voxel_size = float(meta["voxel_size"])
            origin = tuple(float(v) for v in meta["origin"])
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed header: sidecar missing field {exc}") from exc
        if dtype_name not in _RAW_DTYPES:
            raise ValueError(f"unsupported bit depth: dtype {dtype_name}")
        dtype = _RAW_DTYPES[dtype_name]
        vals = np.frombuffer(path.read_bytes(), dtype=np.dtype(dtype).newbyteorder("<"))
        if vals.size != int(np.prod(dims)):
            raise ValueError("payload length mismatch")
        if np.issubdtype(dtype, np.integer):
            arr_flat = vals.astype(float) / np.iinfo(dtype).max
        else:
            arr_flat = vals.astype(float)
        arr = arr_flat.reshape(dims, order="F")
    elif fmt == "csv":
        vals = np.loadtxt(path, ndmin=1, delimiter=",").ravel()
        arr = vals.astype(float)
        dims = (arr.size,)
    else:
        raise ValueError(f"unsupported format: {fmt}")

    if origin is None:
        origin = tuple(0.5 * voxel_size for _ in dims)
    return ImageGrid(dims=dims, voxel_size=voxel_size, origin=tuple(origin),
                     intensities=arr)


def write_image(img: ImageGrid, path, fmt: str | None = None, maxval: int = 255):
    """Write an image as PGM (quantized) or raw float64 + sidecar (exact)."""
    path = Path(path)
    if fmt is None:
        fmt = {".pgm": "pgm", ".raw": "raw"}.get(path.suffix.lower())
        if fmt is None:
            raise ValueError(f"cannot infer format of {path}")
    if fmt == "pgm":
        if img.ndim != 2:
            raise ValueError("PGM output requires a 2D image")
        quant = np.rint(img.intensities * maxval).astype(int)
        nx, ny = img.dims
        lines = [f"P2\n{nx} {ny}\n{maxval}\n"]
        for j in range(ny):
            lines.append(" ".join(str(v) for v in quant[:, j]) + "\n")
        path.write_text("".join(lines))
    elif fmt == "raw":
        payload = np.asarray(img.intensities, dtype="<f8").ravel(order="F")
        path.write_bytes(payload.tobytes())
        meta = {
            "dims": [int(n) for n in img.dims],
            "voxel_size": float(img.voxel_size),
            "origin": [float(v) for v in img.origin],
            "dtype": "float64",
        }
        path.with_suffix(path.suffix + ".yaml").write_text(
            yaml.safe_dump(meta, sort_keys=False))
    else:
        raise ValueError(f"unsupported format: {fmt}")


# ---------------------------------------------------------------------------
# Labeling and training data
# ---------------------------------------------------------------------------

def otsu_threshold(img: ImageGrid) -> LabelGrid:
    """Label pixels by the global threshold maximizing between-class variance.

    The histogram uses 256 uniform bins on [0, 1]; the threshold is the lower
    edge of the first bin of the positive class, and a pixel is labeled +1
    iff its intensity exceeds it.
    """
    vals = img.intensities.ravel()
    bins = np.minimum((vals * OTSU_BINS).astype(int), OTSU_BINS - 1)
    hist = np.bincount(bins, minlength=OTSU_BINS).astype(float)

    # Cumulative zeroth/first moments; split after bin k.
    w0 = np.cumsum(hist)
    total = w0[-1]
    mu = np.cumsum(hist * np.arange(OTSU_BINS))
    mu_t = mu[-1]
    w1 = total - w0
    valid = (w0 > 0) & (w1 > 0)
    between = np.zeros(OTSU_BINS)
    between[valid] = (mu_t * w0[valid] - total * mu[valid]) ** 2 / (
        w0[valid] * w1[valid])
    if not valid.any() or between.max() == 0.0:
        raise ValueError("degenerate histogram: cannot separate intensity classes")
    k = int(np.argmax(between))
    threshold = (k + 1) / OTSU_BINS
    labels = np.where(img.intensities > threshold, 1, -1)
    return LabelGrid(dims=img.dims, labels=labels, threshold=threshold)


def make_training_set(img: ImageGrid, labels: LabelGrid) -> LabeledDataset:
    """One labeled data point per pixel, at the physical pixel centroid."""
    if img.dims != labels.dims:
        raise ValueError("image/label extent mismatch")
    return LabeledDataset(points=img.centroids(),
                          labels=labels.labels.ravel(order="F"))


# ---------------------------------------------------------------------------
# Synthetic image generation
# ---------------------------------------------------------------------------

def _downscale_weights(n_in: int, n_out: int) -> np.ndarray:
    """Area-overlap averaging weights, one row per output pixel.

    Output pixel k covers the input interval [k*f, (k+1)*f) with f = n_in /
    n_out; fractional boundary pixels are weighted by overlap length. For
    integer f this reduces to a plain block mean.
    """
    f = n_in / n_out
    w = np.zeros((n_out, n_in))
    for k in range(n_out):
        lo, hi = k * f, (k + 1) * f
        i0, i1 = int(np.floor(lo)), int(np.ceil(hi))
        for i in range(i0, min(i1, n_in)):
            w[k, i] = min(hi, i + 1) - max(lo, i)
    return w / f


def synth_image(truth: SyntheticTruth, resolution: int, noise_sigma: float = 0.0,
                downscale_factor: float = 1.0, seed: int = 0) -> ImageGrid:
    """Rasterize ground-truth circles, add Gaussian noise, box-downscale.

    Pixels whose centroid lies inside any circle get intensity 1, others 0.
    Noise (std ``noise_sigma``, generator seeded by ``seed``) is added at the
    full resolution and clamped to [0, 1] before downscaling. The output
    resolution ``resolution / downscale_factor`` must be an integer; the
    downscale is an exact area average.
    """
    out_res_f = resolution / downscale_factor
    out_res = int(round(out_res_f))
    if abs(out_res_f - out_res) > 1e-9 or out_res < 1:
        raise ValueError(
            f"resolution {resolution} not divisible by factor {downscale_factor}")

    ell = truth.extent / resolution
    img_hi = ImageGrid(dims=(resolution, resolution), voxel_size=ell,
                       origin=(0.5 * ell, 0.5 * ell),
                       intensities=np.zeros((resolution, resolution)))
    arr = truth.contains(img_hi.centroids()).astype(float).reshape(
        (resolution, resolution), order="F")

    if noise_sigma > 0.0:
        rng = np.random.default_rng(seed)
        arr = np.clip(arr + rng.normal(0.0, noise_sigma, arr.shape), 0.0, 1.0)

    if out_res != resolution:
        w = _downscale_weights(resolution, out_res)
        arr = w @ arr @ w.T

    ell_out = truth.extent / out_res
    return ImageGrid(dims=(out_res, out_res), voxel_size=ell_out,
                     origin=(0.5 * ell_out, 0.5 * ell_out),
                     intensities=np.clip(arr, 0.0, 1.0))
