"""Synthetic four-class "underwater" scenes with controllable degradations.

Each image is rendered from its own random stream ``default_rng([seed, index])``
so the dataset is identical however the work is scheduled.  Files on disk:

* ``<stem>.ppm``: binary PPM (P6, 8-bit RGB),
* ``<stem>.txt``: one ``class cx cy w h`` line per object, normalised, 6 decimals,
* ``manifest.csv``: ``filename,width,height,num_objects`` followed by the
  degradation parameters used for that image.
"""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError, LoadError
from .tensor import Tensor

CLASS_NAMES = ("holothurian", "echinus", "scallop", "starfish")
# instance counts of the four categories in the reference underwater benchmark
DEFAULT_MIXTURE = (8144.0, 31264.0, 10903.0, 14700.0)
MAX_PLACEMENT_TRIES = 50
MID_GRAY = 127.5

# base RGB colours (0..1) per class
_PALETTE = np.array([
    [0.30, 0.22, 0.16],  # holothurian: dark brown
    [0.28, 0.12, 0.34],  # echinus: purple-black
    [0.88, 0.78, 0.62],  # scallop: pale shell
    [0.92, 0.45, 0.16],  # starfish: orange
])


@dataclass(frozen=True)
class DegradationParams:
    gains: tuple[float, float, float] = (1.0, 1.0, 1.0)
    blur_sigma: float = 0.0
    contrast: float = 1.0
    noise_sigma: float = 0.0

    def __post_init__(self):
        if len(self.gains) != 3 or min(self.gains) <= 0:
            raise ConfigError(f"colour gains must be three positive numbers, got {self.gains}")
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise ConfigError("blur and noise sigma must be non-negative")
        if not 0 < self.contrast <= 1:
            raise ConfigError(f"contrast factor must lie in (0, 1], got {self.contrast}")

    @property
    def is_identity(self) -> bool:
        return self == DegradationParams()

    def as_row(self) -> dict[str, str]:
        g = self.gains
        return {"gain_r": f"{g[0]:.6f}", "gain_g": f"{g[1]:.6f}", "gain_b": f"{g[2]:.6f}",
                "blur_sigma": f"{self.blur_sigma:.6f}", "contrast": f"{self.contrast:.6f}",
                "noise_sigma": f"{self.noise_sigma:.6f}"}


@dataclass(frozen=True)
class DegradationRange:
    """Uniform sampling box for per-image degradations (low, high) per axis."""

    gain_r: tuple[float, float] = (1.0, 1.0)
    gain_g: tuple[float, float] = (1.0, 1.0)
    gain_b: tuple[float, float] = (1.0, 1.0)
    blur_sigma: tuple[float, float] = (0.0, 0.0)
    contrast: tuple[float, float] = (1.0, 1.0)
    noise_sigma: tuple[float, float] = (0.0, 0.0)

    def sample(self, rng: np.random.Generator) -> DegradationParams:
        def draw(lo_hi):
            lo, hi = lo_hi
            return float(lo) if lo == hi else float(rng.uniform(lo, hi))

        return DegradationParams((draw(self.gain_r), draw(self.gain_g), draw(self.gain_b)),
                                 draw(self.blur_sigma), draw(self.contrast), draw(self.noise_sigma))


@dataclass(frozen=True)
class SceneSpec:
    image_size: int = 96
    instances: tuple[int, int] = (2, 6)
    mixture: tuple[float, ...] = DEFAULT_MIXTURE
    size_range: tuple[float, float] = (0.08, 0.3)
    overlap_cap: float = 0.3
    seed: int = 0
    degradation: DegradationRange = field(default_factory=DegradationRange)
    texture_strength: float = 1.0

    def __post_init__(self):
        if self.image_size < 8:
            raise ConfigError(f"image_size must be at least 8, got {self.image_size}")
        lo, hi = self.instances
        if lo < 0 or hi < lo:
            raise ConfigError(f"invalid instance count range {self.instances}")
        if len(self.mixture) != len(CLASS_NAMES) or min(self.mixture) < 0 or sum(self.mixture) <= 0:
            raise ConfigError(f"mixture needs {len(CLASS_NAMES)} non-negative weights with a positive sum")
        a, b = self.size_range
        if not 0 < a <= b <= 0.5:
            raise ConfigError(f"size fractions must satisfy 0 < low <= high <= 0.5, got {self.size_range}")
        if not 0 <= self.overlap_cap <= 1:
            raise ConfigError(f"overlap_cap must lie in [0, 1], got {self.overlap_cap}")


DIFFICULTIES = ("easy", "paper-like")


def spec_for(difficulty: str, image_size: int = 96, seed: int = 0) -> SceneSpec:
    """Preset scenes: ``easy`` (large, undegraded objects) and ``paper-like``."""
    if difficulty == "easy":
        return SceneSpec(image_size=image_size, instances=(1, 3), size_range=(0.22, 0.42), overlap_cap=0.1,
                         seed=seed, texture_strength=0.5)
    if difficulty == "paper-like":
        rng = DegradationRange(gain_r=(0.45, 0.8), gain_g=(0.9, 1.1), gain_b=(1.0, 1.25), blur_sigma=(0.0, 1.2),
                               contrast=(0.55, 0.9), noise_sigma=(2.0, 8.0))
        return SceneSpec(image_size=image_size, instances=(2, 6), size_range=(0.1, 0.32), overlap_cap=0.3,
                         seed=seed, degradation=rng)
    raise ConfigError(f"difficulty must be one of {DIFFICULTIES}, got {difficulty!r}")


@dataclass
class Sample:
    image: np.ndarray  # (H, W, 3) uint8
    labels: list[tuple[int, float, float, float, float]]
    degradation: DegradationParams = field(default_factory=DegradationParams)

    def targets(self) -> np.ndarray:
        return np.array(self.labels, dtype=np.float64).reshape(-1, 5)


# ---------------------------------------------------------------------------
# Degradation pipeline
# ---------------------------------------------------------------------------

def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised 1-D Gaussian taps over radius ceil(3 sigma)."""
    r = int(math.ceil(3 * sigma))
    i = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(i * i) / (2 * sigma * sigma))
    return k / k.sum()


def _blur_axis(img: np.ndarray, k: np.ndarray, axis: int) -> np.ndarray:
    r = len(k) // 2
    pad = [(0, 0)] * img.ndim
    pad[axis] = (r, r)
    p = np.pad(img, pad, mode="reflect" if img.shape[axis] > r else "edge")
    out = np.zeros_like(img)
    n = img.shape[axis]
    for j, w in enumerate(k):
        out += w * np.take(p, np.arange(j, j + n), axis=axis)
    return out


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable blur of an (H, W, C) float image with reflected borders."""
    if sigma == 0:
        return img.astype(np.float64, copy=True)
    k = gaussian_kernel(sigma)
    return _blur_axis(_blur_axis(img.astype(np.float64), k, 0), k, 1)


def degrade(image: np.ndarray, params: DegradationParams, rng: np.random.Generator | None = None,
            quantize: bool = True) -> np.ndarray:
    """gain -> blur -> contrast about mid-gray -> noise -> clamp to [0, 255].

    With ``quantize=False`` the float image is returned before clamping and
    rounding, which is what the analytic checks look at.
    """
    if params.is_identity:
        return image.copy() if quantize else image.astype(np.float64)
    x = image.astype(np.float64) * np.asarray(params.gains)
    x = gaussian_blur(x, params.blur_sigma)
    x = (x - MID_GRAY) * params.contrast + MID_GRAY
    if params.noise_sigma > 0:
        if rng is None:
            raise ValueError("noise requires a random generator")
        x = x + rng.normal(0.0, params.noise_sigma, size=x.shape)
    if not quantize:
        return x
    return np.clip(np.rint(x), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def value_noise(h: int, w: int, rng: np.random.Generator, octaves: int = 4, base_cells: int = 3) -> np.ndarray:
    """Sum of bilinearly interpolated random lattices, roughly in [0, 1]."""
    out = np.zeros((h, w))
    total = 0.0
    for o in range(octaves):
        cells = base_cells * 2 ** o
        lattice = rng.uniform(size=(cells + 1, cells + 1))
        ys = np.linspace(0, cells, h, endpoint=False) + cells / (2 * h)
        xs = np.linspace(0, cells, w, endpoint=False) + cells / (2 * w)
        y0, x0 = np.floor(ys).astype(int), np.floor(xs).astype(int)
        fy, fx = ys - y0, xs - x0
        fy, fx = fy * fy * (3 - 2 * fy), fx * fx * (3 - 2 * fx)  # smoothstep
        y1, x1 = np.minimum(y0 + 1, cells), np.minimum(x0 + 1, cells)
        top = lattice[np.ix_(y0, x0)] * (1 - fx) + lattice[np.ix_(y0, x1)] * fx
        bot = lattice[np.ix_(y1, x0)] * (1 - fx) + lattice[np.ix_(y1, x1)] * fx
        amp = 0.5 ** o
        out += amp * (top * (1 - fy)[:, None] + bot * fy[:, None])
        total += amp
    return out / total


def _background(size: int, rng: np.random.Generator, strength: float) -> np.ndarray:
    water = np.array([rng.uniform(0.08, 0.2), rng.uniform(0.35, 0.5), rng.uniform(0.45, 0.6)])
    sand = np.array([rng.uniform(0.45, 0.6), rng.uniform(0.45, 0.55), rng.uniform(0.3, 0.4)])
    depth = np.linspace(0.0, 1.0, size)[:, None, None]
    base = water * (1 - 0.6 * depth) + sand * 0.6 * depth
    tex = value_noise(size, size, rng)[..., None] - 0.5
    return np.clip(base * (1 + 0.6 * strength * tex), 0, 1)


def _shape_alpha(cls: int, u: np.ndarray, v: np.ndarray, r: float, rng: np.random.Generator):
    """Soft coverage and a brightness pattern for one archetype in its local frame."""
    rho = np.hypot(u, v)
    phi = np.arctan2(v, u)
    if cls == 0:  # elongated capsule
        half_len, half_w = r * 0.7, r * rng.uniform(0.25, 0.35)
        du = np.maximum(np.abs(u) - half_len, 0.0)
        d = np.hypot(du, v)
        alpha = np.clip(half_w - d + 0.5, 0, 1)
        shade = 0.85 + 0.15 * np.cos(u * 6.0 / max(r, 1e-9) * np.pi)  # warty bands
    elif cls == 1:  # spiked disc
        spikes = int(rng.integers(10, 15))
        edge = r * (0.55 + 0.45 * np.abs(np.cos(spikes * phi / 2)) ** 6)
        alpha = np.clip(edge - rho + 0.5, 0, 1)
        shade = np.where(rho < 0.55 * r, 1.0, 0.75)
    elif cls == 2:  # fan / ellipse
        a, b = r, r * rng.uniform(0.75, 0.9)
        dn = np.hypot(u / a, v / b)
        alpha = np.clip((1 - dn) * b + 0.5, 0, 1)
        shade = 0.82 + 0.18 * np.cos(14 * phi)  # ribs
    else:  # five-armed star
        edge = r * (0.32 + 0.68 * ((1 + np.cos(5 * phi)) / 2) ** 2)
        alpha = np.clip(edge - rho + 0.5, 0, 1)
        shade = 1.0 - 0.25 * rho / max(r, 1e-9)
    return alpha, shade


def _box_iou(a, b) -> float:
    iw = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    ih = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def render(spec: SceneSpec, index: int) -> Sample:
    """Render image ``index`` of the dataset described by ``spec``."""
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    canvas = _background(size, rng, spec.texture_strength)
    lo, hi = spec.instances
    count = int(rng.integers(lo, hi + 1))
    p = np.asarray(spec.mixture, dtype=np.float64)
    p = p / p.sum()
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    boxes: list[tuple[float, float, float, float]] = []
    labels = []
    for k in range(count):
        cls = int(rng.choice(len(p), p=p))
        for _ in range(MAX_PLACEMENT_TRIES):
            r = max(rng.uniform(*spec.size_range) * size / 2, 2.0)  # half the object extent
            cx, cy = rng.uniform(r, size - r), rng.uniform(r, size - r)
            theta = rng.uniform(0, 2 * np.pi)
            c, s = np.cos(theta), np.sin(theta)
            u = (xx - cx) * c + (yy - cy) * s
            v = -(xx - cx) * s + (yy - cy) * c
            alpha, shade = _shape_alpha(cls, u, v, r, rng)
            on = alpha > 0.5
            if not on.any():
                continue
            rows, cols = np.nonzero(on.any(axis=1))[0], np.nonzero(on.any(axis=0))[0]
            box = (float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))
            if box[2] - box[0] < 2 or box[3] - box[1] < 2:
                continue
            if all(_box_iou(box, b) <= spec.overlap_cap for b in boxes):
                break
        else:
            warnings.warn(f"image {index}: placed {len(boxes)} of {count} objects after {MAX_PLACEMENT_TRIES} tries",
                          RuntimeWarning, stacklevel=2)
            break
        colour = np.clip(_PALETTE[cls] * rng.uniform(0.85, 1.15, size=3), 0, 1)
        obj = colour[None, None, :] * shade[..., None]
        canvas = canvas * (1 - alpha[..., None]) + obj * alpha[..., None]
        boxes.append(box)
        x1, y1, x2, y2 = (b / size for b in box)
        labels.append((cls, round((x1 + x2) / 2, 6), round((y1 + y2) / 2, 6), round(x2 - x1, 6), round(y2 - y1, 6)))
    image = np.clip(np.rint(canvas * 255), 0, 255).astype(np.uint8)
    params = spec.degradation.sample(rng)
    return Sample(degrade(image, params, rng), labels, params)


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def write_ppm(path: str | Path, image: np.ndarray) -> None:
    image = np.ascontiguousarray(image, dtype=np.uint8)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DataError(f"PPM needs an (H, W, 3) image, got {image.shape}")
    h, w, _ = image.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + image.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise LoadError(f"{path}: truncated PPM header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    if fields[0] != b"P6" or fields[3] != b"255":
        raise LoadError(f"{path}: only 8-bit binary PPM (P6, maxval 255) is supported")
    try:
        w, h = int(fields[1]), int(fields[2])
    except ValueError:
        raise LoadError(f"{path}: bad PPM dimensions") from None
    body = raw[pos:pos + w * h * 3]
    if len(body) != w * h * 3:
        raise LoadError(f"{path}: expected {w * h * 3} raster bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).copy()


def format_labels(labels) -> str:
    return "".join(f"{int(c)} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}\n" for c, cx, cy, w, h in labels)


def parse_labels(path: str | Path, num_classes: int = len(CLASS_NAMES)) -> list[tuple[int, float, float, float, float]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 5:
            raise LoadError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
        try:
            cls = int(parts[0])
            cx, cy, w, h = (float(p) for p in parts[1:])
        except ValueError:
            raise LoadError(f"{path}:{lineno}: non-numeric field in {line!r}") from None
        if not 0 <= cls < num_classes:
            raise LoadError(f"{path}:{lineno}: class id {cls} outside 0..{num_classes - 1}")
        tol = 1e-6
        if (w <= 0 or h <= 0 or cx - w / 2 < -tol or cy - h / 2 < -tol
                or cx + w / 2 > 1 + tol or cy + h / 2 > 1 + tol):
            raise LoadError(f"{path}:{lineno}: box outside the unit square or empty")
        out.append((cls, cx, cy, w, h))
    return out


# text files that may sit next to the data without being label files
RESERVED_TEXT_FILES = frozenset({"config.resolved.txt"})

MANIFEST_COLUMNS = ("filename", "width", "height", "num_objects",
                    "gain_r", "gain_g", "gain_b", "blur_sigma", "contrast", "noise_sigma")


def generate(spec: SceneSpec, n: int, out_dir: str | Path) -> Path:
    """Render ``n`` images into ``out_dir`` with labels and a manifest."""
    if n < 1:
        raise ConfigError(f"need at least one image, got n={n}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    width = max(5, len(str(n - 1)))
    rows = []
    for i in range(n):
        sample = render(spec, i)
        stem = f"img_{i:0{width}d}"
        write_ppm(out / f"{stem}.ppm", sample.image)
        (out / f"{stem}.txt").write_text(format_labels(sample.labels))
        row = {"filename": f"{stem}.ppm", "width": str(spec.image_size), "height": str(spec.image_size),
               "num_objects": str(len(sample.labels))}
        row.update(sample.degradation.as_row())
        rows.append(row)
    with open(out / "manifest.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS, lineterminator="\n")
        wr.writeheader()
        wr.writerows(rows)
    return out


def read_manifest(data_dir: str | Path) -> list[dict[str, str]]:
    with open(Path(data_dir) / "manifest.csv", newline="") as fh:
        return list(csv.DictReader(fh))


def load(data_dir: str | Path) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Yield ``(image (3, H, W) in [0, 1], targets (k, 5))`` in lexicographic file order."""
    d = Path(data_dir)
    if not d.is_dir():
        raise LoadError(f"{d}: not a directory")
    images = {p.stem: p for p in d.glob("*.ppm")}
    labels = {p.stem: p for p in d.glob("*.txt") if p.name not in RESERVED_TEXT_FILES}
    for stem in sorted(set(images) ^ set(labels)):
        orphan = images.get(stem) or labels.get(stem)
        raise LoadError(f"{orphan}: no matching {'label' if stem in images else 'image'} file")
    for stem in sorted(images):
        img = read_ppm(images[stem])
        targets = np.array(parse_labels(labels[stem]), dtype=np.float64).reshape(-1, 5)
        yield Tensor(img.transpose(2, 0, 1) / 255.0), targets


def load_arrays(data_dir: str | Path) -> tuple[np.ndarray, list[np.ndarray]]:
    """Whole dataset as an (N, 3, H, W) array plus per-image target arrays."""
    images, targets = [], []
    for img, t in load(data_dir):
        images.append(img.data)
        targets.append(t)
    if not images:
        return np.zeros((0, 3, 0, 0)), []
    return np.stack(images), targets


def spec_to_dict(spec: SceneSpec) -> dict:
    return asdict(spec)


def dataset_stems(data_dir: str | Path) -> list[str]:
    """Image identifiers in the order :func:`load` yields them."""
    return sorted(p.stem for p in Path(data_dir).glob("*.ppm"))
