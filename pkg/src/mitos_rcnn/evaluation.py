"""Centroid-distance matching, F-measure and proliferation grading."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .records import BoxAnnotation, ClassId, Detection

MATCH_RADIUS_UM = 8.0
HPF_WINDOW = 10


@dataclass(frozen=True)
class MatchCriterion:
    """A detection matches a ground-truth mitosis within ``radius_um``.

    ``pixel_scale`` holds the (sx, sy) factors by which the image was resized
    from its native scan; distances are measured in native pixels.
    """
    resolution_um_per_px: float
    radius_um: float = MATCH_RADIUS_UM
    pixel_scale: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if not self.resolution_um_per_px > 0:
            raise ValueError(f"resolution must be positive, got {self.resolution_um_per_px}")

    @property
    def radius_px(self) -> float:
        return self.radius_um / self.resolution_um_per_px


def radius_px(resolution_um_per_px: float, radius_um: float = MATCH_RADIUS_UM) -> float:
    if not resolution_um_per_px > 0:
        raise ValueError(f"resolution must be positive, got {resolution_um_per_px}")
    return radius_um / resolution_um_per_px


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ValueError(f"counts must be non-negative: {self}")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class Pairing:
    detection: int
    ground_truth: int
    distance_px: float


@dataclass
class MatchResult:
    counts: ConfusionCounts
    pairings: list[Pairing]


@dataclass
class MetricsReport:
    counts: ConfusionCounts
    precision: float
    recall: float
    f1: float
    matches: dict[str, list[Pairing]] = field(default_factory=dict)
    per_image: dict[str, ConfusionCounts] = field(default_factory=dict)


def centroid_match(detections: Sequence[Detection], gts: Sequence[BoxAnnotation],
                   crit: MatchCriterion) -> MatchResult:
    """One-to-one greedy matching of mitotic-figure detections to mitotic gts.

    Detections are taken by descending score (ties by position) and each
    claims the nearest unclaimed gt centroid within the radius. Indices in
    the pairings refer to the filtered mitotic-only lists.
    """
    dets = [d for d in detections if d.class_id == ClassId.MITOTIC_FIGURE]
    truth = [g for g in gts if g.class_id == ClassId.MITOTIC_FIGURE]
    sx, sy = crit.pixel_scale
    limit = crit.radius_px
    gxy = np.array([g.centroid for g in truth], dtype=np.float64).reshape(-1, 2)
    claimed = np.zeros(len(truth), dtype=bool)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    pairings: list[Pairing] = []
    for i in order:
        if len(truth) == 0:
            break
        cx, cy = dets[i].centroid
        dist = np.hypot((gxy[:, 0] - cx) / sx, (gxy[:, 1] - cy) / sy)
        dist[claimed] = np.inf
        j = int(np.argmin(dist))
        if dist[j] <= limit:
            claimed[j] = True
            pairings.append(Pairing(i, j, float(dist[j])))
    tp = len(pairings)
    return MatchResult(ConfusionCounts(tp, len(dets) - tp, len(truth) - tp), pairings)


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def metrics(counts: ConfusionCounts) -> MetricsReport:
    precision = _ratio(counts.tp, counts.tp + counts.fp)
    recall = _ratio(counts.tp, counts.tp + counts.fn)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return MetricsReport(counts, precision, recall, f1)


class Grade(str, Enum):
    LOW = "low"
    MODERATE = "moderate"
    SEVERE = "severe"


def proliferation_grade(mitoses_per_10_hpf: int) -> Grade:
    if mitoses_per_10_hpf < 0:
        raise ValueError(f"mitotic count cannot be negative: {mitoses_per_10_hpf}")
    if mitoses_per_10_hpf <= 9:
        return Grade.LOW
    if mitoses_per_10_hpf <= 19:
        return Grade.MODERATE
    return Grade.SEVERE


def evaluate_manifest(detections: Mapping[str, Sequence[Detection]], manifest,
                      radius_um: float = MATCH_RADIUS_UM) -> MetricsReport:
    """Match every manifest image against its detections and pool the counts.

    Images missing from ``detections`` count as having none; detections for
    an image the manifest does not list are an error.
    """
    known = {r.path for r in manifest.records}
    unknown = sorted(set(detections) - known)
    if unknown:
        raise ValueError(f"detections reference images missing from the manifest: {unknown[:5]}")
    total = ConfusionCounts()
    matches: dict[str, list[Pairing]] = {}
    per_image: dict[str, ConfusionCounts] = {}
    for rec in manifest.records:
        crit = MatchCriterion(rec.resolution_um_per_px, radius_um, rec.native_pixel_scale())
        res = centroid_match(detections.get(rec.path, []), rec.annotations, crit)
        total = total + res.counts
        matches[rec.path] = res.pairings
        per_image[rec.path] = res.counts
    report = metrics(total)
    report.matches = matches
    report.per_image = per_image
    return report


def window_grades(per_image: Mapping[str, ConfusionCounts], window: int = HPF_WINDOW):
    """Predicted mitotic count and grade for consecutive windows of ``window`` images."""
    counts = [c.tp + c.fp for c in per_image.values()]
    out = []
    for k in range(0, len(counts), window):
        n = sum(counts[k:k + window])
        out.append((n, proliferation_grade(n)))
    return out


def format_report(report: MetricsReport, title: str = "mitosis detection") -> str:
    c = report.counts
    lines = [
        f"Evaluation: {title}",
        f"  images evaluated : {len(report.per_image)}",
        f"  true positives   : {c.tp}",
        f"  false positives  : {c.fp}",
        f"  false negatives  : {c.fn}",
        f"  precision        : {report.precision:.4f}",
        f"  recall           : {report.recall:.4f}",
        f"  F1               : {report.f1:.3f}",
        "",
        "[metrics]",
        f"tp={c.tp}",
        f"fp={c.fp}",
        f"fn={c.fn}",
        f"precision={report.precision:.6f}",
        f"recall={report.recall:.6f}",
        f"f1={report.f1:.6f}",
    ]
    if report.per_image:
        for k, (n, grade) in enumerate(window_grades(report.per_image)):
            lines.append(f"window{k}_count={n}")
            lines.append(f"window{k}_grade={grade.value}")
    return "\n".join(lines) + "\n"


def parse_key_values(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#") or line.startswith("[") or "=" not in line:
            continue
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_counts(text: str) -> ConfusionCounts:
    kv = parse_key_values(text)
    try:
        return ConfusionCounts(int(kv["tp"]), int(kv["fp"]), int(kv["fn"]))
    except KeyError as exc:
        raise ValueError(f"counts file lacks {exc.args[0]!r}") from None
