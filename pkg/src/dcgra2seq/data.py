"""Sketch ingestion, rasterisation, patch cropping and healing masks.

Sequences are stored as stroke-3 rows ``(dx, dy, pen)`` where ``pen == 1``
means the pen is lifted after that point. The first row holds the absolute
start position (its offset from the origin).
"""
from __future__ import annotations

import collections
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np
from scipy import ndimage
from skimage.draw import line as bresenham
from skimage.transform import resize

log = logging.getLogger(__name__)

CANVAS = 640
PATCH = 256
SHAPES = ("circle", "square", "zigzag", "two_strokes")


@dataclass
class StrokeSequence:
    points: np.ndarray  # (n, 3): dx, dy, pen
    category: str = ""
    key: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)

    def __len__(self):
        return len(self.points)

    def absolute(self) -> np.ndarray:
        """(n, 2) absolute x/y coordinates via prefix sum."""
        return np.cumsum(self.points[:, :2], axis=0)

    def stroke_ids(self) -> np.ndarray:
        """Index of the stroke owning each point."""
        pen = self.points[:, 2]
        return np.concatenate([[0], np.cumsum(pen[:-1] > 0.5)]).astype(int) if len(pen) else np.zeros(0, int)

    def strokes(self) -> list[np.ndarray]:
        absolute = self.absolute()
        ids = self.stroke_ids()
        return [absolute[ids == s] for s in range(ids.max() + 1)] if len(ids) else []

    def __eq__(self, other):
        return isinstance(other, StrokeSequence) and np.array_equal(self.points, other.points)

    @classmethod
    def from_strokes(cls, strokes: Sequence[np.ndarray], category: str = "", key: str = "") -> "StrokeSequence":
        """Build from absolute-coordinate strokes, each an (k, 2) array."""
        pts, pens = [], []
        for s in strokes:
            s = np.asarray(s, dtype=np.float64).reshape(-1, 2)
            if len(s) == 0:
                continue
            pts.append(s)
            pen = np.zeros(len(s))
            pen[-1] = 1
            pens.append(pen)
        if not pts:
            return cls(np.zeros((0, 3)), category, key)
        absolute = np.concatenate(pts)
        deltas = np.diff(absolute, axis=0, prepend=np.zeros((1, 2)))
        return cls(np.column_stack([deltas, np.concatenate(pens)]), category, key)


@dataclass
class PatchSet:
    patches: np.ndarray  # (M, 256, 256)
    full: np.ndarray  # (256, 256)
    centers: np.ndarray  # (M, 2) integer x, y


@dataclass
class MaskSpec:
    probability: float
    seed: int
    applied: list[int] = field(default_factory=list)


# -- ingestion ---------------------------------------------------------------

def parse_quickdraw_ndjson(stream: Iterable[str], counter: collections.Counter | None = None) -> list[StrokeSequence]:
    """Parse QuickDraw simplified-format lines into stroke-3 sequences.

    Malformed lines and empty drawings are skipped and tallied in ``counter``
    under ``"malformed"`` / ``"empty"``.
    """
    counter = counter if counter is not None else collections.Counter()
    out = []
    for lineno, line in enumerate(stream):
        line = line.strip()
        if not line:
            continue
        try:
            obj = json.loads(line)
            strokes = [np.column_stack([np.asarray(s[0], float), np.asarray(s[1], float)])
                       for s in obj["drawing"]]
        except (ValueError, KeyError, TypeError, IndexError):
            counter["malformed"] += 1
            continue
        seq = StrokeSequence.from_strokes(strokes, str(obj.get("word", "")), str(obj.get("key_id", lineno)))
        if len(seq) == 0:
            counter["empty"] += 1
            continue
        out.append(seq)
    skipped = counter["malformed"] + counter["empty"]
    if skipped:
        log.warning("skipped %d lines (%d malformed, %d empty)", skipped, counter["malformed"], counter["empty"])
    return out


def to_ndjson_line(seq: StrokeSequence) -> str:
    drawing = [[[int(round(v)) for v in s[:, 0]], [int(round(v)) for v in s[:, 1]]] for s in seq.strokes()]
    return json.dumps({"word": seq.category, "key_id": seq.key, "drawing": drawing})


def normalize(seq: StrokeSequence, canvas: int = CANVAS, fill: float = 0.9) -> StrokeSequence:
    """Scale and centre so the bounding box fits ``fill`` of the canvas; integer coordinates."""
    if len(seq) == 0:
        return seq
    absolute = seq.absolute()
    lo, hi = absolute.min(axis=0), absolute.max(axis=0)
    extent = float((hi - lo).max())
    scale = fill * canvas / extent if extent > 0 else 1.0
    mid = (lo + hi) / 2
    absolute = np.rint((absolute - mid) * scale + canvas / 2)
    deltas = np.diff(absolute, axis=0, prepend=np.zeros((1, 2)))
    return StrokeSequence(np.column_stack([deltas, seq.points[:, 2]]), seq.category, seq.key)


# -- raster ------------------------------------------------------------------

def rasterize(seq: StrokeSequence, canvas: int = CANVAS, thickness: int = 1) -> np.ndarray:
    """Render 1-pixel Bresenham segments into a ``canvas x canvas`` float32 image indexed [y, x]."""
    img = np.zeros((canvas, canvas), dtype=np.float32)
    if len(seq) == 0:
        return img
    xy = np.clip(np.rint(seq.absolute()), 0, canvas - 1).astype(int)
    pen = seq.points[:, 2]
    prev_lift = True
    for k in range(len(xy)):
        if k > 0 and pen[k - 1] < 0.5:
            rr, cc = bresenham(xy[k - 1, 1], xy[k - 1, 0], xy[k, 1], xy[k, 0])
            img[rr, cc] = 1.0
        elif prev_lift and pen[k] > 0.5:
            img[xy[k, 1], xy[k, 0]] = 1.0  # single-point stroke
        prev_lift = pen[k] > 0.5
    if thickness > 1:
        img = ndimage.grey_dilation(img, size=(thickness, thickness))
    return img


def center_indices(n: int, m: int) -> np.ndarray:
    """Evenly spaced point indices ``floor(k * n / m)``; repeats points in place when n < m."""
    return (np.arange(m) * n) // m


def select_patch_centers(seq: StrokeSequence, m: int, canvas: int = CANVAS) -> np.ndarray:
    if m < 1:
        raise ValueError("select_patch_centers: M must be >= 1")
    absolute = seq.absolute()
    if len(absolute) == 0:
        raise ValueError("select_patch_centers: sequence has no points")
    pts = np.clip(np.rint(absolute), 0, canvas - 1).astype(int)
    return pts[center_indices(len(pts), m)]


def _crop(padded: np.ndarray, cx: int, cy: int, size: int) -> np.ndarray:
    # padded has a size//2 border on every side
    return padded[cy:cy + size, cx:cx + size]


def crop_patches(canvas: np.ndarray, centers: np.ndarray, size: int = PATCH) -> PatchSet:
    half = size // 2
    padded = np.pad(canvas, half)
    patches = np.stack([_crop(padded, int(x), int(y), size) for x, y in centers]) if len(centers) else \
        np.zeros((0, size, size), canvas.dtype)
    full = resize(canvas, (size, size), order=1, anti_aliasing=False, preserve_range=True).astype(canvas.dtype)
    return PatchSet(patches, full, np.asarray(centers))


def mask_seed(sketch_id: int, seed: int) -> int:
    """Per-sketch mask seed; independent of any model state."""
    return int(np.random.SeedSequence([int(seed), int(sketch_id)]).generate_state(1)[0])


def apply_masks(canvas: np.ndarray, centers: np.ndarray, masking: MaskSpec, size: int = PATCH) -> np.ndarray:
    """Zero a ``size x size`` region around each centre chosen with ``masking.probability``.

    Records chosen centre indices in ``masking.applied`` and returns a new canvas.
    """
    if not 0.0 <= masking.probability <= 1.0:
        raise ValueError(f"mask probability {masking.probability} outside [0, 1]")
    rng = np.random.default_rng(masking.seed)
    draws = rng.random(len(centers))
    masking.applied = [i for i in range(len(centers)) if draws[i] < masking.probability]
    out = canvas.copy()
    half = size // 2
    h, w = canvas.shape
    for i in masking.applied:
        x, y = int(centers[i][0]), int(centers[i][1])
        out[max(0, y - half):min(h, y + half), max(0, x - half):min(w, x + half)] = 0
    return out


def prepare_patches(seq: StrokeSequence, m: int, mask_prob: float = 0.0, mask_seed_: int = 0,
                    thickness: int = 1) -> tuple[PatchSet, np.ndarray, MaskSpec]:
    """Rasterise, choose centres, mask (before cropping), then crop."""
    canvas = rasterize(seq, thickness=thickness)
    if len(seq):
        centers = select_patch_centers(seq, m)
    else:
        centers = np.full((m, 2), CANVAS // 2)
    masking = MaskSpec(mask_prob, mask_seed_)
    if mask_prob > 0:
        canvas = apply_masks(canvas, centers, masking)
    return crop_patches(canvas, centers), canvas, masking


# -- stroke-5 ----------------------------------------------------------------

def to_stroke5(seq: StrokeSequence, max_len: int, origin: float = CANVAS / 2) -> np.ndarray:
    """(max_len + 1, 5) rows ``(dx, dy, p_down, p_lift, p_end)``; the first offset is taken from ``origin``."""
    n = len(seq)
    if n > max_len:
        raise ValueError(f"sequence of length {n} exceeds max_len {max_len}")
    out = np.zeros((max_len + 1, 5))
    out[:, 4] = 1
    if n:
        pts = seq.points.copy()
        pts[0, :2] -= origin
        out[:n, :2] = pts[:, :2]
        out[:n, 2] = 1 - pts[:, 2]
        out[:n, 3] = pts[:, 2]
        out[:n, 4] = 0
    return out


def from_stroke5(s5: np.ndarray, origin: float = CANVAS / 2, category: str = "", key: str = "") -> StrokeSequence:
    rows = []
    for r in np.asarray(s5):
        if r[4] > 0.5:
            break
        rows.append((r[0], r[1], 1.0 if r[3] > 0.5 else 0.0))
    pts = np.array(rows, dtype=np.float64).reshape(-1, 3)
    if len(pts):
        pts[0, :2] += origin
        pts[-1, 2] = 1.0
    return StrokeSequence(pts, category, key)


# -- synthetic corpus ----------------------------------------------------------

def _closed_ring(rng, n, aspect, angle, rotation):
    t = angle + np.linspace(0, 2 * np.pi, n, endpoint=False) * rng.choice([-1, 1])
    pts = np.column_stack([np.cos(t), aspect * np.sin(t)])
    c, s = np.cos(rotation), np.sin(rotation)
    pts = pts @ np.array([[c, s], [-s, c]])
    return np.vstack([pts, pts[:1]])


def generate_synthetic(shape: str, rng: np.random.Generator) -> StrokeSequence:
    """A small deterministic-for-seed sketch drawn inside the canvas."""
    center = np.array([CANVAS / 2, CANVAS / 2]) + rng.uniform(-40, 40, 2)
    size = rng.uniform(150, 250)
    if shape == "circle":
        n = int(rng.integers(9, 15))
        ring = _closed_ring(rng, n, rng.uniform(0.45, 1.0), rng.uniform(0, 2 * np.pi), rng.uniform(0, np.pi))
        strokes = [center + size * ring]
    elif shape == "square":
        corners = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], float) * [1.0, rng.uniform(0.6, 1.0)]
        start = int(rng.integers(4))
        corners = np.roll(corners, -start, axis=0)
        sides = []
        for k in range(4):
            a, b = corners[k], corners[(k + 1) % 4]
            sides.append([a, (a + b) / 2])
        path = np.vstack([np.vstack(sides), corners[:1]])
        strokes = [center + size * path]
    elif shape == "zigzag":
        teeth = int(rng.integers(4, 8))
        xs = np.linspace(-1, 1, teeth * 2)
        amp = rng.uniform(0.2, 0.8)
        ys = amp * np.where(np.arange(len(xs)) % 2 == 0, -1, 1) + rng.uniform(-0.05, 0.05, len(xs))
        tilt = rng.uniform(-0.5, 0.5)
        path = np.column_stack([xs, ys + tilt * xs])
        strokes = [center + size * path]
    elif shape == "two_strokes":
        k = int(rng.integers(4, 7))
        a = np.column_stack([np.linspace(-1, 1, k), rng.uniform(-0.3, 0.3) + 0.1 * rng.normal(size=k)])
        b = np.column_stack([rng.uniform(-0.3, 0.3) + 0.1 * rng.normal(size=k), np.linspace(-1, 1, k)])
        strokes = [center + size * a, center + size * b]
    else:
        raise ValueError(f"unknown synthetic shape {shape!r}; choose from {SHAPES}")
    strokes = [np.clip(s, 0, CANVAS - 1) for s in strokes]
    return StrokeSequence.from_strokes(strokes, category=shape)


def synthetic_corpus(categories: Sequence[str], per_category: int, seed: int = 0,
                     normalized: bool = True) -> list[StrokeSequence]:
    """``per_category`` sketches per shape, category-major, keys ``<shape>-<i>``."""
    out = []
    for ci, cat in enumerate(categories):
        for i in range(per_category):
            rng = np.random.default_rng([seed, ci, i])
            s = generate_synthetic(cat, rng)
            s.key = f"{cat}-{i}"
            out.append(normalize(s) if normalized else s)
    return out


# -- binary cache -----------------------------------------------------------

_DCS_MAGIC = b"DCS1"
_POINT = np.dtype([("dx", "<i2"), ("dy", "<i2"), ("pen", "u1")])


def write_cache(fh: BinaryIO, seqs: Sequence[StrokeSequence]) -> None:
    fh.write(_DCS_MAGIC + struct.pack("<I", len(seqs)))
    for s in seqs:
        rec = np.zeros(len(s), dtype=_POINT)
        rec["dx"] = np.rint(s.points[:, 0])
        rec["dy"] = np.rint(s.points[:, 1])
        rec["pen"] = s.points[:, 2] > 0.5
        fh.write(struct.pack("<I", len(s)))
        fh.write(rec.tobytes())


def read_cache(fh: BinaryIO, category: str = "") -> list[StrokeSequence]:
    if fh.read(4) != _DCS_MAGIC:
        raise ValueError("not a DCS1 cache file")
    (count,) = struct.unpack("<I", fh.read(4))
    out = []
    for i in range(count):
        (n,) = struct.unpack("<I", fh.read(4))
        rec = np.frombuffer(fh.read(n * _POINT.itemsize), dtype=_POINT)
        pts = np.column_stack([rec["dx"], rec["dy"], rec["pen"]]).astype(np.float64)
        out.append(StrokeSequence(pts, category, f"{category}-{i}"))
    return out


def load_dataset(path: str | Path, max_len: int | None = None) -> list[StrokeSequence]:
    """Load every ``*.dcs`` cache (or, failing that, ``*.ndjson``) in a directory.

    Category is the file stem; files are read in sorted order. NDJSON input is
    normalised on load. Sequences longer than ``max_len`` are dropped.
    """
    path = Path(path)
    files = [path] if path.is_file() else sorted(path.glob("*.dcs")) or sorted(path.glob("*.ndjson"))
    seqs: list[StrokeSequence] = []
    for f in files:
        if f.suffix == ".dcs":
            with open(f, "rb") as fh:
                seqs.extend(read_cache(fh, f.stem))
        else:
            with open(f) as fh:
                for i, s in enumerate(parse_quickdraw_ndjson(fh)):
                    s = normalize(s)
                    s.category = f.stem
                    s.key = s.key or f"{f.stem}-{i}"
                    seqs.append(s)
    if max_len is not None:
        kept = [s for s in seqs if len(s) <= max_len]
        if len(kept) < len(seqs):
            log.warning("dropped %d sequences longer than %d points", len(seqs) - len(kept), max_len)
        seqs = kept
    return seqs
