"""Frame preprocessing, synthetic HPF generation and the dataset manifest.

Images are ``(3, H, W)`` float arrays in [0, 1]. Boxes are in pixel units of
the image they are attached to; every geometric transform rewrites the
annotations alongside the pixels.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .boxes import Box
from .records import BoxAnnotation, ClassId

INPUT_SIZE = 299
ROTATIONS = (90, 180, 270)
TILE_GRID = 4
TILE_KEEP_FRACTION = 0.25

# x40 scanner frames: (width, height, um/px)
SCANNERS = {
    "aperio": (1539, 1376, 0.2455),
    "hamamatsu": (1663, 1485, 0.2273),
}


@dataclass
class HpfFrame:
    pixels: np.ndarray
    resolution_um_per_px: float
    scanner_tag: str = ""

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 3 or self.pixels.shape[0] != 3 or min(self.pixels.shape[1:]) < 1:
            raise ValueError(f"frame pixels must be (3, H, W) with H, W > 0, got {self.pixels.shape}")
        if not self.resolution_um_per_px > 0:
            raise ValueError(f"resolution must be positive, got {self.resolution_um_per_px}")

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def width(self) -> int:
        return self.pixels.shape[2]


# ---------------------------------------------------------------------------
# geometry
# ---------------------------------------------------------------------------

def tile_bounds(length: int, parts: int = TILE_GRID) -> list[tuple[int, int]]:
    edges = [(i * length) // parts for i in range(parts + 1)]
    return [(edges[i], edges[i + 1]) for i in range(parts)]


def tile_frame(frame: HpfFrame, annotations: Sequence[BoxAnnotation]):
    """Split a frame into a 4x4 grid of tiles.

    Returns 16 ``(tile_frame, annotations, (row, col), (x0, y0))`` tuples in
    row-major order. Each annotation goes to the tile holding its centroid;
    its box is clipped to that tile and dropped if less than a quarter of
    the original area survives.
    """
    if frame.height < TILE_GRID or frame.width < TILE_GRID:
        raise ValueError(f"frame {frame.width}x{frame.height} too small to tile")
    rows = tile_bounds(frame.height)
    cols = tile_bounds(frame.width)
    tiles = []
    for ti, (y0, y1) in enumerate(rows):
        for tj, (x0, x1) in enumerate(cols):
            kept = []
            for ann in annotations:
                cx, cy = ann.centroid
                in_row = y0 <= cy < y1 or (ti == TILE_GRID - 1 and cy == y1)
                in_col = x0 <= cx < x1 or (tj == TILE_GRID - 1 and cx == x1)
                if not (in_row and in_col):
                    continue
                b = ann.box
                bx0, by0 = max(b.x, x0), max(b.y, y0)
                bx1, by1 = min(b.x + b.w, x1), min(b.y + b.h, y1)
                if bx1 <= bx0 or by1 <= by0:
                    continue
                if (bx1 - bx0) * (by1 - by0) < TILE_KEEP_FRACTION * b.area:
                    continue
                box = Box(bx0 - x0, by0 - y0, bx1 - bx0, by1 - by0)
                c = (min(max(cx - x0, box.x), box.x + box.w), min(max(cy - y0, box.y), box.y + box.h))
                kept.append(BoxAnnotation(box, ann.class_id, c))
            sub = HpfFrame(frame.pixels[:, y0:y1, x0:x1].copy(), frame.resolution_um_per_px, frame.scanner_tag)
            tiles.append((sub, kept, (ti, tj), (x0, y0)))
    return tiles


def _bilinear_axis(n_in: int, n_out: int):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_image(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centers (identity at equal size)."""
    _, h, w = img.shape
    if (h, w) == (out_h, out_w):
        return img.copy()
    lo, hi, f = _bilinear_axis(h, out_h)
    rows = img[:, lo, :] * (1 - f)[None, :, None] + img[:, hi, :] * f[None, :, None]
    lo, hi, f = _bilinear_axis(w, out_w)
    return rows[:, :, lo] * (1 - f)[None, None, :] + rows[:, :, hi] * f[None, None, :]


def scale_annotation(ann: BoxAnnotation, sx: float, sy: float) -> BoxAnnotation:
    b = ann.box
    return BoxAnnotation(Box(b.x * sx, b.y * sy, b.w * sx, b.h * sy), ann.class_id,
                         (ann.centroid[0] * sx, ann.centroid[1] * sy))


def resize_to_input(img: np.ndarray, annotations: Sequence[BoxAnnotation], size: int = INPUT_SIZE):
    """Resample to ``size x size`` and rescale annotations.

    Returns ``(pixels, annotations, (sx, sy))``; the scale factors are what a
    matcher needs to convert distances back to native pixels (the effective
    pixel pitch becomes ``resolution / sx`` by ``resolution / sy``).
    """
    _, h, w = img.shape
    sx, sy = size / w, size / h
    out = resize_image(np.asarray(img, dtype=np.float64), size, size)
    if sx == 1.0 and sy == 1.0:
        return out, list(annotations), (1.0, 1.0)
    return out, [scale_annotation(a, sx, sy) for a in annotations], (sx, sy)


def _rotate_box_cw(box: Box, n: int) -> Box:
    return Box(n - box.y - box.h, box.x, box.h, box.w)


def rotate_augment(img: np.ndarray, annotations: Sequence[BoxAnnotation], angle: int):
    """Lossless clockwise rotation of a square image by 90, 180 or 270 degrees."""
    if angle not in ROTATIONS:
        raise ValueError(f"rotation angle must be one of {ROTATIONS}, got {angle}")
    _, h, w = img.shape
    if h != w:
        raise ValueError(f"rotation needs a square image, got {w}x{h}")
    quarter_turns = angle // 90
    out = np.rot90(img, k=-quarter_turns, axes=(1, 2)).copy()
    anns = list(annotations)
    for _ in range(quarter_turns):
        anns = [BoxAnnotation(_rotate_box_cw(a.box, w), a.class_id, (w - a.centroid[1], a.centroid[0]))
                for a in anns]
    return out, anns


# ---------------------------------------------------------------------------
# stain normalization (statistics transfer in a decorrelated log colour space)
# ---------------------------------------------------------------------------

_RGB2LMS = np.array([[0.3811, 0.5783, 0.0402],
                     [0.1967, 0.7244, 0.0782],
                     [0.0241, 0.1288, 0.8444]])
_LMS2LAB = np.diag([1 / math.sqrt(3), 1 / math.sqrt(6), 1 / math.sqrt(2)]) @ np.array(
    [[1.0, 1.0, 1.0], [1.0, 1.0, -2.0], [1.0, -1.0, 0.0]])
_LMS2RGB = np.linalg.inv(_RGB2LMS)
_LAB2LMS = np.linalg.inv(_LMS2LAB)
_LOG_OFFSET = 1e-6
MIN_CHANNEL_VARIANCE = 1e-6


@dataclass(frozen=True)
class StainStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]


def to_lab(img: np.ndarray) -> np.ndarray:
    flat = np.asarray(img, dtype=np.float64).reshape(3, -1)
    lms = np.maximum(_RGB2LMS @ flat, 0.0)
    return (_LMS2LAB @ np.log(lms + _LOG_OFFSET)).reshape(img.shape)


def from_lab(lab: np.ndarray) -> np.ndarray:
    flat = lab.reshape(3, -1)
    lms = np.exp(_LAB2LMS @ flat) - _LOG_OFFSET
    return (_LMS2RGB @ lms).reshape(lab.shape)


def stain_stats(img: np.ndarray) -> StainStats:
    lab = to_lab(img).reshape(3, -1)
    var = np.maximum(lab.var(axis=1), MIN_CHANNEL_VARIANCE)
    return StainStats(tuple(lab.mean(axis=1).tolist()), tuple(np.sqrt(var).tolist()))


def stain_normalize(img: np.ndarray, target: StainStats) -> np.ndarray:
    """Match per-channel mean and spread to ``target`` in lab space, clamp to [0, 1]."""
    lab = to_lab(img).reshape(3, -1)
    src = stain_stats(img)
    mu, sd = np.array(src.mean)[:, None], np.array(src.std)[:, None]
    tmu, tsd = np.array(target.mean)[:, None], np.array(target.std)[:, None]
    out = (lab - mu) / sd * tsd + tmu
    return np.clip(from_lab(out.reshape(img.shape)), 0.0, 1.0)


# ---------------------------------------------------------------------------
# synthetic HPF frames
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SynthConfig:
    size: int = INPUT_SIZE
    mitoses: tuple[int, int] = (1, 3)
    negatives: tuple[int, int] = (1, 3)
    object_size: tuple[float, float] = (15.0, 35.0)
    normal_nuclei: tuple[int, int] = (6, 14)
    resolution_um_per_px: float = 0.2455
    scanner_tag: str = "synthetic"
    max_retries: int = 200
    min_gap: float = 4.0

    def __post_init__(self):
        for name in ("mitoses", "negatives", "normal_nuclei", "object_size"):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ValueError(f"bad range for {name}: {(lo, hi)}")
        object.__setattr__(self, "mitoses", tuple(int(v) for v in self.mitoses))
        object.__setattr__(self, "negatives", tuple(int(v) for v in self.negatives))
        object.__setattr__(self, "normal_nuclei", tuple(int(v) for v in self.normal_nuclei))
        object.__setattr__(self, "object_size", tuple(float(v) for v in self.object_size))


_EOSIN = np.array([0.94, 0.76, 0.84])
_NUCLEUS = np.array([0.60, 0.45, 0.72])
_CHROMATIN = np.array([0.20, 0.10, 0.33])
_APOPTOTIC = np.array([0.24, 0.13, 0.36])


def _pink_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    white = rng.normal(size=(n, n))
    fy = np.fft.fftfreq(n)[:, None]
    fx = np.fft.fftfreq(n)[None, :]
    f = np.sqrt(fx ** 2 + fy ** 2)
    f[0, 0] = 1.0
    field_ = np.real(np.fft.ifft2(np.fft.fft2(white) / f))
    field_ -= field_.mean()
    return field_ / (field_.std() + 1e-12)


def _stamp(img: np.ndarray, alpha: np.ndarray, color: np.ndarray, y0: int, x0: int) -> None:
    h, w = alpha.shape
    region = img[:, y0:y0 + h, x0:x0 + w]
    region *= 1 - alpha[None]
    region += alpha[None] * color[:, None, None]


def _shape_alpha(rng: np.random.Generator, diameter: float, irregular: bool) -> np.ndarray:
    """Soft-edged alpha mask of an object whose extent is at most ``diameter``."""
    half = diameter / 2.0
    pad = int(math.ceil(half)) + 2
    yy, xx = np.mgrid[-pad:pad + 1, -pad:pad + 1].astype(np.float64)
    r = np.hypot(xx, yy)
    theta = np.arctan2(yy, xx)
    if irregular:
        amps = rng.uniform(0.12, 0.28, size=4)
        phases = rng.uniform(0, 2 * np.pi, size=4)
        wobble = sum(a * np.cos(k * theta + p) for a, k, p in zip(amps, (2, 3, 5, 7), phases))
        radius = half / (1 + amps.sum()) * (1 + wobble)
        alpha = np.clip(radius - r + 0.5, 0, 1)
        # clumped chromatin: punch irregular gaps inside the figure
        speckle = rng.uniform(size=alpha.shape) < 0.25
        alpha = np.where(speckle & (r < radius - 1.5), alpha * 0.35, alpha)
    else:
        squash = rng.uniform(0.9, 1.0)
        rot = rng.uniform(0, np.pi)
        u = xx * np.cos(rot) + yy * np.sin(rot)
        v = (-xx * np.sin(rot) + yy * np.cos(rot)) / squash
        rr = np.hypot(u, v)
        alpha = np.clip(half - rr + 0.5, 0, 1) * (0.75 + 0.25 * np.clip(1 - rr / half, 0, 1))
    return alpha


def _bbox_of(alpha: np.ndarray):
    ys, xs = np.nonzero(alpha > 0.5)
    if len(xs) == 0:
        return None
    x0, x1 = xs.min(), xs.max() + 1
    y0, y1 = ys.min(), ys.max() + 1
    wsum = alpha.sum()
    yy, xx = np.mgrid[0:alpha.shape[0], 0:alpha.shape[1]]
    cx = float((alpha * (xx + 0.5)).sum() / wsum)
    cy = float((alpha * (yy + 0.5)).sum() / wsum)
    return x0, y0, x1, y1, cx, cy


def synth_generate(cfg: SynthConfig, rng: np.random.Generator):
    """Render one synthetic H&E-like frame with annotated look-alike objects.

    Mitotic figures are dark, irregular, clumped blobs; the negative class
    consists of dark, smooth, round blobs of similar size. Returns
    ``(frame, annotations, info)`` where ``info`` reports any placement
    shortfall.
    """
    n = cfg.size
    noise = _pink_noise(rng, n)
    img = np.clip(_EOSIN[:, None, None] + 0.05 * noise[None] * np.array([1.0, 1.3, 1.0])[:, None, None], 0, 1)

    taken: list[tuple[float, float, float, float]] = []

    def free(x0, y0, x1, y1):
        g = cfg.min_gap
        return all(x1 + g <= a or b + g <= x0 or y1 + g <= c or d + g <= y0 for a, c, b, d in taken)

    for _ in range(rng.integers(cfg.normal_nuclei[0], cfg.normal_nuclei[1] + 1)):
        d = rng.uniform(7, 13)
        alpha = _shape_alpha(rng, d, irregular=False) * 0.55
        h = alpha.shape[0]
        y0, x0 = rng.integers(0, n - h, size=2)
        _stamp(img, alpha, _NUCLEUS + rng.normal(0, 0.03, 3), int(y0), int(x0))

    wanted = [ClassId.MITOTIC_FIGURE] * int(rng.integers(cfg.mitoses[0], cfg.mitoses[1] + 1))
    wanted += [ClassId.NOT_MITOTIC_FIGURE] * int(rng.integers(cfg.negatives[0], cfg.negatives[1] + 1))
    wanted = [wanted[i] for i in rng.permutation(len(wanted))]
    lo, hi = cfg.object_size
    annotations: list[BoxAnnotation] = []
    shortfall = {ClassId.MITOTIC_FIGURE.label: 0, ClassId.NOT_MITOTIC_FIGURE.label: 0}
    for cls in wanted:
        placed = False
        for _ in range(cfg.max_retries):
            d = rng.uniform(lo, hi)
            alpha = _shape_alpha(rng, d, irregular=cls is ClassId.MITOTIC_FIGURE)
            bb = _bbox_of(alpha)
            if bb is None:
                continue
            bx0, by0, bx1, by1, cx, cy = bb
            if not (lo <= bx1 - bx0 <= hi and lo <= by1 - by0 <= hi):
                continue
            h, w = alpha.shape
            oy = int(rng.integers(-by0, n - by1 + 1))
            ox = int(rng.integers(-bx0, n - bx1 + 1))
            box = (ox + bx0, oy + by0, ox + bx1, oy + by1)
            if not free(*box):
                continue
            # the alpha patch may hang over the edge; only paint the in-frame part
            ys0, xs0 = max(0, -oy), max(0, -ox)
            ys1, xs1 = min(h, n - oy), min(w, n - ox)
            color = (_CHROMATIN if cls is ClassId.MITOTIC_FIGURE else _APOPTOTIC) + rng.normal(0, 0.02, 3)
            _stamp(img, alpha[ys0:ys1, xs0:xs1], color, oy + ys0, ox + xs0)
            taken.append(tuple(float(v) for v in box))
            annotations.append(BoxAnnotation(
                Box(float(box[0]), float(box[1]), float(box[2] - box[0]), float(box[3] - box[1])),
                cls, (ox + cx, oy + cy)))
            placed = True
            break
        if not placed:
            shortfall[cls.label] += 1

    img = np.clip(img + rng.normal(0, 0.01, img.shape), 0, 1)
    frame = HpfFrame(img, cfg.resolution_um_per_px, cfg.scanner_tag)
    return frame, annotations, {"shortfall": shortfall}


# ---------------------------------------------------------------------------
# image files
# ---------------------------------------------------------------------------

def quantize(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_png(path: str | Path, img: np.ndarray) -> None:
    arr = np.transpose(quantize(img), (1, 2, 0))
    Image.fromarray(arr, mode="RGB").save(path, format="PNG", optimize=False)


def load_png_u8(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return np.ascontiguousarray(np.transpose(arr, (2, 0, 1)))


def load_png(path: str | Path) -> np.ndarray:
    return load_png_u8(path).astype(np.float64) / 255.0


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

MANIFEST_MAGIC = "# mitos-manifest v1"
IMAGE_HEADER = "image,width,height,resolution_um_per_px,scanner,source,tile,rotation,stain_normalized,scale_x,scale_y"
ANNOTATION_HEADER = "image,x,y,w,h,cx,cy,class"


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Provenance:
    source: str = ""
    tile: int = -1
    rotation: int = 0
    stain_normalized: bool = False
    scale_x: float = 1.0
    scale_y: float = 1.0


@dataclass
class ImageRecord:
    path: str
    width: int
    height: int
    resolution_um_per_px: float
    scanner_tag: str = ""
    annotations: list[BoxAnnotation] = field(default_factory=list)
    provenance: Provenance = field(default_factory=Provenance)

    def native_pixel_scale(self) -> tuple[float, float]:
        return (self.provenance.scale_x, self.provenance.scale_y)


@dataclass
class DatasetManifest:
    records: list[ImageRecord] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def validate(self) -> None:
        seen = set()
        for rec in self.records:
            if rec.path in seen:
                raise ManifestError(f"duplicate image path {rec.path!r}")
            seen.add(rec.path)
            for ann in rec.annotations:
                if not ann.inside(rec.width, rec.height):
                    raise ManifestError(
                        f"record {rec.path!r}: annotation {ann.box} lies outside the {rec.width}x{rec.height} image")


def _fmt(v: float) -> str:
    return repr(float(v))


def _check_field(value: str, what: str) -> str:
    if "," in value or "\n" in value:
        raise ManifestError(f"{what} may not contain commas or newlines: {value!r}")
    return value


def dumps_manifest(m: DatasetManifest) -> str:
    m.validate()
    lines = [MANIFEST_MAGIC]
    for k in sorted(m.metadata):
        lines.append(f"# {_check_field(k, 'metadata key')}={_check_field(str(m.metadata[k]), 'metadata value')}")
    lines += ["[images]", IMAGE_HEADER]
    for r in m.records:
        p = r.provenance
        lines.append(",".join([
            _check_field(r.path, "image path"), str(r.width), str(r.height), _fmt(r.resolution_um_per_px),
            _check_field(r.scanner_tag, "scanner tag"), _check_field(p.source, "source"), str(p.tile),
            str(p.rotation), "1" if p.stain_normalized else "0", _fmt(p.scale_x), _fmt(p.scale_y),
        ]))
    lines += ["[annotations]", ANNOTATION_HEADER]
    for r in m.records:
        for a in r.annotations:
            b = a.box
            lines.append(",".join([r.path, _fmt(b.x), _fmt(b.y), _fmt(b.w), _fmt(b.h),
                                   _fmt(a.centroid[0]), _fmt(a.centroid[1]), a.class_id.label]))
    return "\n".join(lines) + "\n"


def loads_manifest(text: str, origin: str = "<manifest>") -> DatasetManifest:
    m = DatasetManifest()
    if not text.strip():
        return m
    section = None
    by_path: dict[str, ImageRecord] = {}
    expect_header = False
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        where = f"{origin}:{lineno}"
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if line == MANIFEST_MAGIC or not body:
                continue
            if body.startswith("mitos-manifest"):
                raise ManifestError(f"{where}: unsupported manifest version {body!r}")
            if "=" in body:
                k, v = body.split("=", 1)
                m.metadata[k.strip()] = v.strip()
            continue
        if line in ("[images]", "[annotations]"):
            section = line
            expect_header = True
            continue
        if expect_header:
            wanted = IMAGE_HEADER if section == "[images]" else ANNOTATION_HEADER
            if line != wanted:
                raise ManifestError(f"{where}: expected header {wanted!r}")
            expect_header = False
            continue
        parts = line.split(",")
        try:
            if section == "[images]":
                if len(parts) != 11:
                    raise ValueError(f"expected 11 fields, got {len(parts)}")
                path = parts[0]
                if path in by_path:
                    raise ValueError(f"duplicate image path {path!r}")
                prov = Provenance(parts[5], int(parts[6]), int(parts[7]), parts[8] == "1",
                                  float(parts[9]), float(parts[10]))
                rec = ImageRecord(path, int(parts[1]), int(parts[2]), float(parts[3]), parts[4], [], prov)
                if rec.width <= 0 or rec.height <= 0 or not rec.resolution_um_per_px > 0:
                    raise ValueError("image size and resolution must be positive")
                by_path[path] = rec
                m.records.append(rec)
            elif section == "[annotations]":
                if len(parts) != 8:
                    raise ValueError(f"expected 8 fields, got {len(parts)}")
                path = parts[0]
                rec = by_path.get(path)
                if rec is None:
                    raise ValueError(f"annotation refers to unknown image {path!r}")
                x, y, w, h, cx, cy = (float(v) for v in parts[1:7])
                ann = BoxAnnotation(Box(x, y, w, h), ClassId.from_label(parts[7]), (cx, cy))
                if not ann.inside(rec.width, rec.height):
                    raise ValueError(f"record {path!r}: annotation {ann.box} lies outside the "
                                     f"{rec.width}x{rec.height} image")
                rec.annotations.append(ann)
            else:
                raise ValueError("data line outside of a section")
        except ValueError as exc:
            raise ManifestError(f"{where}: {exc}") from None
    return m


def save_manifest(path: str | Path, m: DatasetManifest) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_manifest(m))


def load_manifest(path: str | Path) -> DatasetManifest:
    return loads_manifest(Path(path).read_text(encoding="utf-8"), str(path))


def record_from_frame(path: str, frame: HpfFrame, annotations, provenance: Provenance | None = None) -> ImageRecord:
    return ImageRecord(path, frame.width, frame.height, frame.resolution_um_per_px, frame.scanner_tag,
                       list(annotations), provenance or Provenance())


def with_provenance(rec: ImageRecord, **changes) -> ImageRecord:
    return replace(rec, provenance=replace(rec.provenance, **changes))
