"""Two-stage cascade proposal generation.

RPN-1 scores anchors on the stride-8 conv_4 map. conv_4 is then upsampled,
L2-normalized together with conv_3 and reduced to a 256-channel fused map
at stride 4. RPN-2 runs on the fused map with two slots per cell:

* slot 0 scores and regresses a 64x64 sliding-window anchor,
* slot 1 re-scores and re-regresses any RPN-1 proposal whose center falls
  in that cell.

Both candidate sources go through one joint NMS before the top-K cut.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .boxes import Box, clip_array, decode_array, iou_matrix, nms
from .tensor import (Tensor, ShapeError, concat_channels, conv2d, deconv2d,
                     l2_normalize_channels, relu, reshape, softmax, transpose)

RPN2_SLOTS = 2
SLIDING_SLOT, REFINE_SLOT = 0, 1
NINE_ANCHOR_PRESET = {"rpn1_scales": (16.0, 32.0, 64.0), "rpn1_ratios": (0.5, 1.0, 2.0)}


@dataclass(frozen=True)
class ProposalConfig:
    image_size: int = 299
    rpn1_scales: tuple[float, ...] = (16.0, 32.0, 64.0)
    rpn1_ratios: tuple[float, ...] = (1.0,)
    rpn1_stride: int = 8
    rpn2_scale: float = 64.0
    rpn2_stride: int = 4
    nms_threshold: float = 0.7
    rpn1_top_k: int = 300
    rpn2_top_k: int = 100
    min_size: float = 2.0
    head_channels: int = 32
    fused_channels: int = 256
    l2_scale_init: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "rpn1_scales", tuple(float(s) for s in self.rpn1_scales))
        object.__setattr__(self, "rpn1_ratios", tuple(float(r) for r in self.rpn1_ratios))

    @property
    def rpn1_anchors_per_pos(self) -> int:
        return len(self.rpn1_scales) * len(self.rpn1_ratios)


@dataclass(frozen=True)
class Anchor:
    box: Box
    feature_pos: tuple[int, int]
    source: int


@dataclass(frozen=True)
class Proposal:
    box: Box
    objectness: float
    stage: int


# ---------------------------------------------------------------------------
# anchors
# ---------------------------------------------------------------------------

def anchor_grid(map_h: int, map_w: int, stride: float, scales: Sequence[float],
                ratios: Sequence[float]) -> np.ndarray:
    """Anchors as an ``(H*W*A, 4)`` array ordered by row, column, scale, ratio."""
    if len(scales) == 0 or len(ratios) == 0:
        raise ValueError("anchor generation needs at least one scale and one ratio")
    if map_h < 1 or map_w < 1:
        raise ValueError(f"map must be at least 1x1, got {map_h}x{map_w}")
    shapes = np.array([(s * math.sqrt(r), s / math.sqrt(r)) for s in scales for r in ratios])
    cy = (np.arange(map_h) + 0.5) * stride
    cx = (np.arange(map_w) + 0.5) * stride
    cyy, cxx = np.meshgrid(cy, cx, indexing="ij")
    centers = np.stack([cxx.ravel(), cyy.ravel()], axis=1)               # (HW, 2)
    a = len(shapes)
    out = np.empty((len(centers), a, 4))
    out[:, :, 0] = centers[:, None, 0] - shapes[None, :, 0] / 2
    out[:, :, 1] = centers[:, None, 1] - shapes[None, :, 1] / 2
    out[:, :, 2] = shapes[None, :, 0]
    out[:, :, 3] = shapes[None, :, 1]
    return out.reshape(-1, 4)


def generate_anchors(map_h: int, map_w: int, stride: float, scales: Sequence[float],
                     ratios: Sequence[float], source: int = 1) -> list[Anchor]:
    grid = anchor_grid(map_h, map_w, stride, scales, ratios)
    per_pos = len(scales) * len(ratios)
    anchors = []
    for k, row in enumerate(grid):
        cell = k // per_pos
        anchors.append(Anchor(Box(*row), (cell // map_w, cell % map_w), source))
    return anchors


def _box_array(items) -> np.ndarray:
    if isinstance(items, np.ndarray):
        return items.reshape(-1, 4).astype(np.float64)
    rows = []
    for it in items:
        b = getattr(it, "box", it)
        rows.append([b.x, b.y, b.w, b.h])
    return np.array(rows, dtype=np.float64).reshape(-1, 4)


def assign_anchors(anchors, gt, pos_thr: float = 0.7, neg_thr: float = 0.3):
    """Label anchors against ground truth boxes.

    Returns ``(labels, matched)``: labels are 1 (positive), 0 (negative) or
    -1 (ignore); ``matched[i]`` is the best-overlapping gt index (-1 when
    there is no gt). Each gt's highest-IoU anchor is forced positive.
    """
    if pos_thr <= neg_thr:
        raise ValueError(f"positive threshold {pos_thr} must exceed negative threshold {neg_thr}")
    a = _box_array(anchors)
    g = _box_array(gt)
    labels = np.full(len(a), -1, dtype=np.int64)
    matched = np.full(len(a), -1, dtype=np.int64)
    if len(g) == 0:
        labels[:] = 0
        return labels, matched
    if len(a) == 0:
        return labels, matched
    ov = iou_matrix(a, g)
    best = ov.max(axis=1)
    matched[:] = ov.argmax(axis=1)
    labels[best < neg_thr] = 0
    labels[best >= pos_thr] = 1
    for j in range(len(g)):
        i = int(ov[:, j].argmax())
        if ov[i, j] > 0:
            labels[i] = 1
            matched[i] = j
    return labels, matched


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def init_rpn_head(rng: np.random.Generator, c_in: int, mid: int, anchors_per_pos: int,
                  sigma: float = 0.01) -> dict[str, Tensor]:
    def w(*shape):
        return Tensor(rng.normal(0.0, sigma, shape), requires_grad=True)

    def z(n):
        return Tensor(np.zeros(n), requires_grad=True)

    return {
        "conv/weight": w(mid, c_in, 3, 3), "conv/bias": z(mid),
        "cls/weight": w(anchors_per_pos * 2, mid, 1, 1), "cls/bias": z(anchors_per_pos * 2),
        "reg/weight": w(anchors_per_pos * 4, mid, 1, 1), "reg/bias": z(anchors_per_pos * 4),
    }


def init_fusion(rng: np.random.Generator, c3: int, c4: int, cfg: ProposalConfig,
                sigma: float = 0.01) -> dict[str, Tensor]:
    return {
        "deconv/weight": Tensor(rng.normal(0.0, sigma, (c4, c4, 2, 2)), requires_grad=True),
        "conv3_scale": Tensor(np.full(c3, cfg.l2_scale_init), requires_grad=True),
        "conv4_scale": Tensor(np.full(c4, cfg.l2_scale_init), requires_grad=True),
        "reduce/weight": Tensor(rng.normal(0.0, sigma, (cfg.fused_channels, c3 + c4, 1, 1)), requires_grad=True),
        "reduce/bias": Tensor(np.zeros(cfg.fused_channels), requires_grad=True),
    }


# ---------------------------------------------------------------------------
# forward pieces
# ---------------------------------------------------------------------------

def fuse_features(conv3: Tensor, conv4: Tensor, fusion_params: dict[str, Tensor],
                  return_concat: bool = False):
    """Upsample conv_4 to conv_3 resolution, L2-normalize both, concatenate, reduce with a 1x1 conv.

    With ``return_concat`` the normalized concatenation is returned as well.
    """
    up = deconv2d(conv4, fusion_params["deconv/weight"], stride=2)
    if up.shape[1:] != conv3.shape[1:]:
        raise ShapeError(f"upsampled conv_4 is {up.shape[1:]} but conv_3 is {conv3.shape[1:]}")
    n3 = l2_normalize_channels(conv3, fusion_params["conv3_scale"])
    n4 = l2_normalize_channels(up, fusion_params["conv4_scale"])
    cat = concat_channels(n3, n4)
    fused = relu(conv2d(cat, fusion_params["reduce/weight"], fusion_params["reduce/bias"]))
    return (fused, cat) if return_concat else fused


def rpn_head_rows(fmap: Tensor, head_params: dict[str, Tensor], anchors_per_pos: int):
    """Head outputs flattened to one row per anchor, ordered (row, col, anchor).

    Returns ``(probs (N, 2), deltas (N, 4))``.
    """
    _, h, w = fmap.shape
    a = anchors_per_pos
    hidden = relu(conv2d(fmap, head_params["conv/weight"], head_params["conv/bias"], stride=1, pad=1))
    logits = conv2d(hidden, head_params["cls/weight"], head_params["cls/bias"])
    deltas = conv2d(hidden, head_params["reg/weight"], head_params["reg/bias"])
    logit_rows = reshape(transpose(reshape(logits, (a, 2, h, w)), (2, 3, 0, 1)), (h * w * a, 2))
    delta_rows = reshape(transpose(reshape(deltas, (a, 4, h, w)), (2, 3, 0, 1)), (h * w * a, 4))
    return softmax(logit_rows), delta_rows


def rpn_head_forward(fmap: Tensor, head_params: dict[str, Tensor], anchors_per_pos: int):
    """Objectness ``(A*2, H, W)`` (softmax per anchor pair) and deltas ``(A*4, H, W)``."""
    _, h, w = fmap.shape
    a = anchors_per_pos
    probs, deltas = rpn_head_rows(fmap, head_params, a)
    obj = transpose(reshape(probs, (h, w, a, 2)), (2, 3, 0, 1))
    reg = transpose(reshape(deltas, (h, w, a, 4)), (2, 3, 0, 1))
    return reshape(obj, (a * 2, h, w)), reshape(reg, (a * 4, h, w))


def select_proposals(boxes: np.ndarray, deltas: np.ndarray, scores: np.ndarray,
                     cfg: ProposalConfig, top_k: int):
    """Decode, clip, drop slivers, NMS and cut to ``top_k``. Returns (boxes, scores, source index)."""
    decoded = clip_array(decode_array(boxes, deltas), cfg.image_size)
    ok = (decoded[:, 2] >= cfg.min_size) & (decoded[:, 3] >= cfg.min_size) & np.isfinite(scores)
    idx = np.flatnonzero(ok)
    keep = nms(decoded[idx], scores[idx], cfg.nms_threshold, max_keep=top_k)
    chosen = idx[keep]
    return decoded[chosen], scores[chosen], chosen


def rpn1_anchor_array(cfg: ProposalConfig, map_h: int, map_w: int) -> np.ndarray:
    return anchor_grid(map_h, map_w, cfg.rpn1_stride, cfg.rpn1_scales, cfg.rpn1_ratios)


def rpn1_from_rows(probs: np.ndarray, deltas: np.ndarray, map_hw: tuple[int, int], cfg: ProposalConfig):
    anchors = rpn1_anchor_array(cfg, *map_hw)
    boxes, scores, _ = select_proposals(anchors, deltas, probs[:, 1], cfg, cfg.rpn1_top_k)
    return boxes, scores


def rpn1_propose(conv4: Tensor, params: dict[str, Tensor], cfg: ProposalConfig) -> list[Proposal]:
    probs, deltas = rpn_head_rows(conv4, params, cfg.rpn1_anchors_per_pos)
    boxes, scores = rpn1_from_rows(probs.data, deltas.data, conv4.shape[1:], cfg)
    return [Proposal(Box(*b), float(s), 1) for b, s in zip(boxes, scores)]


def rpn2_candidates(map_hw: tuple[int, int], rpn1_boxes: np.ndarray, cfg: ProposalConfig):
    """Candidate reference boxes for RPN-2 and the head row each one reads.

    Sliding-window anchors come first, then the RPN-1 proposals snapped to the
    fused-map cell holding their center.
    """
    h, w = map_hw
    sliding = anchor_grid(h, w, cfg.rpn2_stride, (cfg.rpn2_scale,), (1.0,))
    rows = np.arange(h * w) * RPN2_SLOTS + SLIDING_SLOT
    prior = np.asarray(rpn1_boxes, dtype=np.float64).reshape(-1, 4)
    if len(prior):
        cx = prior[:, 0] + prior[:, 2] / 2
        cy = prior[:, 1] + prior[:, 3] / 2
        col = np.clip(np.floor(cx / cfg.rpn2_stride), 0, w - 1).astype(np.int64)
        row = np.clip(np.floor(cy / cfg.rpn2_stride), 0, h - 1).astype(np.int64)
        rows = np.concatenate([rows, (row * w + col) * RPN2_SLOTS + REFINE_SLOT])
        sliding = np.concatenate([sliding, prior])
    return sliding, rows


def rpn2_from_rows(probs: np.ndarray, deltas: np.ndarray, map_hw: tuple[int, int],
                   rpn1_boxes: np.ndarray, cfg: ProposalConfig):
    cands, rows = rpn2_candidates(map_hw, rpn1_boxes, cfg)
    boxes, scores, _ = select_proposals(cands, deltas[rows], probs[rows, 1], cfg, cfg.rpn2_top_k)
    return boxes, scores


def rpn2_propose(fused: Tensor, rpn1_proposals: Sequence[Proposal], params: dict[str, Tensor],
                 cfg: ProposalConfig) -> list[Proposal]:
    probs, deltas = rpn_head_rows(fused, params, RPN2_SLOTS)
    prior = _box_array(rpn1_proposals)
    boxes, scores = rpn2_from_rows(probs.data, deltas.data, fused.shape[1:], prior, cfg)
    return [Proposal(Box(*b), float(s), 2) for b, s in zip(boxes, scores)]


def format_proposals(proposals: Sequence[Proposal]) -> str:
    """One ``x y w h score stage`` line per proposal, in the given order."""
    return "".join(
        f"{p.box.x:.4f} {p.box.y:.4f} {p.box.w:.4f} {p.box.h:.4f} {p.objectness:.6f} {p.stage}\n"
        for p in proposals
    )
