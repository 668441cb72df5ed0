"""Detection network: ROI pooling, classifier/regressor heads, multi-task loss, inference."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import checkpoint as ckpt_io
from .backbone import Backbone, BackboneConfig, backbone_forward, build_backbone
from .boxes import (Box, IMAGE_SIZE, clip_array, decode_array, encode_array, iou_matrix, nms)
from .proposal import (RPN2_SLOTS, ProposalConfig, fuse_features, init_fusion, init_rpn_head,
                       rpn1_anchor_array, rpn1_from_rows, rpn2_candidates, rpn2_from_rows,
                       rpn_head_rows, assign_anchors)
from .records import NUM_CLASSES, BoxAnnotation, ClassId, Detection
from .tensor import (ShapeError, Tensor, add, cross_entropy, fully_connected, mul, relu,
                     reshape, roi_pool as _roi_pool_cells, smooth_l1, softmax, take_rows, tsum)

FUSED_STRIDE = 4
PIXEL_MEAN = 0.5


@dataclass(frozen=True)
class DetectorConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    proposal: ProposalConfig = field(default_factory=ProposalConfig)
    roi_size: tuple[int, int] = (7, 7)
    head_width: int = 256
    score_threshold: float = 0.5
    nms_threshold: float = 0.3
    max_detections: int = 100
    loss_lambda: float = 10.0
    rpn_batch: int = 256
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    roi_batch: int = 64
    roi_pos_fraction: float = 0.25
    roi_fg_iou: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        bb = BackboneConfig(**d.pop("backbone", {}))
        pc = ProposalConfig(**d.pop("proposal", {}))
        if "roi_size" in d:
            d["roi_size"] = tuple(d["roi_size"])
        return cls(backbone=bb, proposal=pc, **d)


@dataclass
class LossBreakdown:
    total: Tensor
    cls_term: Tensor
    reg_term: Tensor
    n_cls: int
    n_reg: int
    lam: float

    def values(self) -> tuple[float, float, float]:
        return self.total.item(), self.cls_term.item(), self.reg_term.item()


# ---------------------------------------------------------------------------
# ROI pooling
# ---------------------------------------------------------------------------

def box_to_cells(boxes: np.ndarray, map_hw: tuple[int, int], stride: int = FUSED_STRIDE) -> np.ndarray:
    """Map image-space boxes to clipped ``(c0, r0, c1, r1)`` cell ranges (exclusive ends)."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    h, w = map_hw
    c0 = np.clip(np.floor(b[:, 0] / stride), 0, w)
    r0 = np.clip(np.floor(b[:, 1] / stride), 0, h)
    c1 = np.clip(np.ceil((b[:, 0] + b[:, 2]) / stride), 0, w)
    r1 = np.clip(np.ceil((b[:, 1] + b[:, 3]) / stride), 0, h)
    return np.stack([c0, r0, c1, r1], axis=1).astype(np.int64)


def roi_pool(fmap: Tensor, box: Box, out: tuple[int, int] = (7, 7), stride: int = FUSED_STRIDE) -> Tensor:
    """Fixed-size ``(C, oh, ow)`` max-pooled feature for one image-space box."""
    cells = box_to_cells(box.as_array(), fmap.shape[1:], stride)
    c0, r0, c1, r1 = cells[0]
    if c1 <= c0 or r1 <= r0:
        raise ValueError(f"box {box} lies entirely outside the {fmap.shape[1]}x{fmap.shape[2]} map")
    return reshape(_roi_pool_cells(fmap, cells, out), (fmap.shape[0],) + tuple(out))


def roi_pool_boxes(fmap: Tensor, boxes: np.ndarray, out: tuple[int, int] = (7, 7),
                   stride: int = FUSED_STRIDE) -> Tensor:
    return _roi_pool_cells(fmap, box_to_cells(boxes, fmap.shape[1:], stride), out)


# ---------------------------------------------------------------------------
# head
# ---------------------------------------------------------------------------

def init_head(rng: np.random.Generator, in_features: int, width: int, sigma: float = 0.01) -> dict[str, Tensor]:
    def w(*shape):
        return Tensor(rng.normal(0.0, sigma, shape), requires_grad=True)

    def z(n):
        return Tensor(np.zeros(n), requires_grad=True)

    return {
        "fc1/weight": w(width, in_features), "fc1/bias": z(width),
        "fc2/weight": w(width, width), "fc2/bias": z(width),
        "cls/weight": w(NUM_CLASSES, width), "cls/bias": z(NUM_CLASSES),
        "reg/weight": w(NUM_CLASSES * 4, width), "reg/bias": z(NUM_CLASSES * 4),
    }


def head_forward(roi_feat: Tensor, params: dict[str, Tensor]):
    """Class probabilities and per-class deltas for pooled ROI features.

    ``roi_feat`` is ``(C, oh, ow)`` for one ROI or ``(R, C, oh, ow)`` for a
    batch; outputs are ``(3,)``/``(12,)`` or ``(R, 3)``/``(R, 12)``.
    """
    single = roi_feat.data.ndim == 3
    n_in = params["fc1/weight"].shape[1]
    flat_shape = (n_in,) if single else (roi_feat.shape[0], n_in)
    if int(np.prod(roi_feat.shape[-3:])) != n_in:
        raise ShapeError(f"head expects {n_in} pooled features per ROI, got {roi_feat.shape}")
    x = reshape(roi_feat, flat_shape)
    x = relu(fully_connected(x, params["fc1/weight"], params["fc1/bias"]))
    x = relu(fully_connected(x, params["fc2/weight"], params["fc2/bias"]))
    probs = softmax(fully_connected(x, params["cls/weight"], params["cls/bias"]))
    deltas = fully_connected(x, params["reg/weight"], params["reg/bias"])
    return probs, deltas


# ---------------------------------------------------------------------------
# loss and sampling
# ---------------------------------------------------------------------------

def multitask_loss(pred_obj: Tensor, gt_obj, pred_deltas: Tensor, gt_deltas, n_cls: int,
                   n_reg: int, lam: float = 10.0) -> LossBreakdown:
    """Classification log loss averaged over ``n_cls`` plus ``lam`` times the
    smooth-L1 box loss of positive rows (class > 0) averaged over ``n_reg``."""
    labels = np.asarray(gt_obj, dtype=np.int64).reshape(-1)
    targets = np.asarray(gt_deltas, dtype=np.float64).reshape(-1, 4)
    if not (pred_obj.shape[0] == len(labels) == pred_deltas.shape[0] == len(targets)):
        raise ValueError(
            f"misaligned loss inputs: {pred_obj.shape[0]} predictions, {len(labels)} labels, "
            f"{pred_deltas.shape[0]} deltas, {len(targets)} delta targets"
        )
    if n_cls <= 0 or n_reg <= 0:
        raise ValueError("normalizers must be positive")
    cls_term = mul(tsum(cross_entropy(pred_obj, labels)), 1.0 / n_cls)
    gate = (labels > 0).astype(np.float64)
    if gate.any():
        diff = add(pred_deltas, -targets)
        reg_term = mul(tsum(mul(smooth_l1(diff), gate[:, None])), 1.0 / n_reg)
    else:
        reg_term = Tensor(0.0)
    total = add(cls_term, mul(reg_term, lam))
    return LossBreakdown(total, cls_term, reg_term, n_cls, n_reg, lam)


def sample_minibatch_anchors(labels, size: int, rng: np.random.Generator,
                             pos_fraction: float = 0.5) -> np.ndarray:
    """Draw up to ``size`` labelled rows, positives capped at ``pos_fraction``,
    topping up with negatives. Returns sorted indices."""
    if size <= 0:
        raise ValueError("sample size must be positive")
    labels = np.asarray(labels)
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    n_pos = min(len(pos), int(size * pos_fraction))
    n_neg = min(len(neg), size - n_pos)
    chosen_pos = pos[rng.permutation(len(pos))[:n_pos]]
    chosen_neg = neg[rng.permutation(len(neg))[:n_neg]]
    return np.sort(np.concatenate([chosen_pos, chosen_neg]))


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------

class MitosRCNN:
    """Backbone, RPN-1, fusion, RPN-2 and detection head under one parameter namespace."""

    def __init__(self, config: DetectorConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params
        self.backbone = Backbone(config.backbone, {k: v for k, v in params.items() if k.startswith("backbone/")})

    @classmethod
    def build(cls, config: DetectorConfig | None = None, seed: int = 0, sigma: float = 0.01) -> "MitosRCNN":
        config = config or DetectorConfig()
        bb = build_backbone(config.backbone, seed, sigma)
        rng = np.random.default_rng([seed, 1])
        c3, c4 = config.backbone.stage_channels[2], config.backbone.stage_channels[3]
        pc = config.proposal
        params: dict[str, Tensor] = dict(bb.params)
        groups = {
            "rpn1": init_rpn_head(rng, c4, pc.head_channels, pc.rpn1_anchors_per_pos, sigma),
            "fusion": init_fusion(rng, c3, c4, pc, sigma),
            "rpn2": init_rpn_head(rng, pc.fused_channels, pc.head_channels, RPN2_SLOTS, sigma),
            "head": init_head(rng, pc.fused_channels * config.roi_size[0] * config.roi_size[1],
                              config.head_width, sigma),
        }
        for prefix, group in groups.items():
            for k, v in group.items():
                params[f"{prefix}/{k}"] = v
        for name, t in params.items():
            t.name = name
        return cls(config, params)

    def group(self, prefix: str) -> dict[str, Tensor]:
        p = prefix + "/"
        return {k[len(p):]: v for k, v in self.params.items() if k.startswith(p)}

    # -- serialization --------------------------------------------------
    def to_checkpoint(self, metadata: dict | None = None) -> ckpt_io.Checkpoint:
        meta = {"detector": self.config.to_dict()}
        meta.update(metadata or {})
        return ckpt_io.Checkpoint({k: v.data for k, v in self.params.items()}, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: ckpt_io.Checkpoint) -> "MitosRCNN":
        if "detector" not in ckpt.metadata:
            raise ckpt_io.CheckpointError("checkpoint carries no detector configuration")
        config = DetectorConfig.from_dict(ckpt.metadata["detector"])
        net = cls.build(config, seed=0)
        if set(net.params) != set(ckpt.params):
            missing = sorted(set(net.params) ^ set(ckpt.params))[:5]
            raise ckpt_io.CheckpointError(f"checkpoint parameters do not match the architecture: {missing}")
        for k, t in net.params.items():
            if t.shape != ckpt.params[k].shape:
                raise ckpt_io.CheckpointError(f"shape mismatch for {k}: {t.shape} vs {ckpt.params[k].shape}")
            t.data = ckpt.params[k].copy()
        return net

    # -- forward pieces -------------------------------------------------
    def features(self, image: np.ndarray | Tensor):
        img = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
        n = self.config.backbone.input_size
        if img.shape != (3, n, n):
            raise ShapeError(f"detector expects an image of shape (3, {n}, {n}), got {img.shape}")
        conv3, conv4 = backbone_forward(self.backbone, Tensor(img - PIXEL_MEAN))
        return conv3, conv4

    def proposals(self, conv3: Tensor, conv4: Tensor):
        pc = self.config.proposal
        probs1, deltas1 = rpn_head_rows(conv4, self.group("rpn1"), pc.rpn1_anchors_per_pos)
        rpn1_boxes, _ = rpn1_from_rows(probs1.data, deltas1.data, conv4.shape[1:], pc)
        fused = fuse_features(conv3, conv4, self.group("fusion"))
        probs2, deltas2 = rpn_head_rows(fused, self.group("rpn2"), RPN2_SLOTS)
        rpn2_boxes, rpn2_scores = rpn2_from_rows(probs2.data, deltas2.data, fused.shape[1:], rpn1_boxes, pc)
        return {
            "rpn1": (probs1, deltas1, rpn1_boxes),
            "rpn2": (probs2, deltas2, rpn2_boxes, rpn2_scores),
            "fused": fused,
        }

    # -- training -------------------------------------------------------
    def training_loss(self, image, annotations: Sequence[BoxAnnotation], rng: np.random.Generator,
                      fixed_proposals: tuple[np.ndarray, np.ndarray] | None = None):
        """Sum of the RPN-1, RPN-2 and head multi-task losses for one image.

        Proposal boxes are constants to the backward pass (no gradient flows
        through box coordinates). ``fixed_proposals=(rpn1_boxes, rpn2_boxes)``
        replaces the ones this forward pass would select, which makes the
        loss a smooth function of the parameters for gradient checks.
        Returns ``(total, {site: LossBreakdown})``.
        """
        cfg = self.config
        pc = cfg.proposal
        gt = np.array([[a.box.x, a.box.y, a.box.w, a.box.h] for a in annotations], dtype=np.float64).reshape(-1, 4)
        gt_cls = np.array([int(a.class_id) for a in annotations], dtype=np.int64)

        conv3, conv4 = self.features(image)
        out = self.proposals(conv3, conv4)
        probs1, deltas1, rpn1_boxes = out["rpn1"]
        probs2, deltas2, rpn2_boxes, _ = out["rpn2"]
        fused = out["fused"]
        if fixed_proposals is not None:
            rpn1_boxes, rpn2_boxes = (np.asarray(b, dtype=np.float64).reshape(-1, 4) for b in fixed_proposals)

        anchors1 = rpn1_anchor_array(pc, *conv4.shape[1:])
        site1 = self._rpn_site_loss(probs1, deltas1, anchors1, np.arange(len(anchors1)), gt, rng)
        cands, rows = rpn2_candidates(fused.shape[1:], rpn1_boxes, pc)
        site2 = self._rpn_site_loss(probs2, deltas2, cands, rows, gt, rng)
        site3 = self._head_site_loss(fused, rpn2_boxes, gt, gt_cls, rng)
        total = add(add(site1.total, site2.total), site3.total)
        return total, {"rpn1": site1, "rpn2": site2, "head": site3}

    def _rpn_site_loss(self, probs: Tensor, deltas: Tensor, refs: np.ndarray, rows: np.ndarray,
                       gt: np.ndarray, rng: np.random.Generator) -> LossBreakdown:
        cfg = self.config
        labels, matched = assign_anchors(refs, gt, cfg.rpn_pos_iou, cfg.rpn_neg_iou)
        idx = sample_minibatch_anchors(labels, cfg.rpn_batch, rng)
        targets = np.zeros((len(idx), 4))
        pos = labels[idx] == 1
        if pos.any():
            targets[pos] = encode_array(refs[idx][pos], gt[matched[idx][pos]])
        return multitask_loss(take_rows(probs, rows[idx]), labels[idx], take_rows(deltas, rows[idx]),
                              targets, n_cls=max(len(idx), 1), n_reg=len(refs), lam=cfg.loss_lambda)

    def _head_site_loss(self, fused: Tensor, rois: np.ndarray, gt: np.ndarray, gt_cls: np.ndarray,
                        rng: np.random.Generator) -> LossBreakdown:
        cfg = self.config
        rois = np.concatenate([rois.reshape(-1, 4), gt])
        rois = rois[(rois[:, 2] > 0) & (rois[:, 3] > 0)]
        if len(gt):
            ov = iou_matrix(rois, gt)
            matched = ov.argmax(axis=1)
            fg = ov.max(axis=1) >= cfg.roi_fg_iou
        else:
            matched = np.zeros(len(rois), dtype=np.int64)
            fg = np.zeros(len(rois), dtype=bool)
        idx = sample_minibatch_anchors(fg.astype(np.int64), cfg.roi_batch, rng, cfg.roi_pos_fraction)
        sel = rois[idx]
        classes = np.where(fg[idx], gt_cls[matched[idx]] if len(gt) else 0, 0)
        targets = np.zeros((len(idx), 4))
        if fg[idx].any():
            m = fg[idx]
            targets[m] = encode_array(sel[m], gt[matched[idx][m]])
        feats = roi_pool_boxes(fused, sel, cfg.roi_size)
        probs, deltas = head_forward(feats, self.group("head"))
        per_class = reshape(deltas, (len(idx) * NUM_CLASSES, 4))
        chosen = take_rows(per_class, np.arange(len(idx)) * NUM_CLASSES + classes)
        n = max(len(idx), 1)
        return multitask_loss(probs, classes, chosen, targets, n_cls=n, n_reg=n, lam=cfg.loss_lambda)

    # -- inference ------------------------------------------------------
    def detect(self, image, score_thr: float | None = None, nms_thr: float | None = None,
               max_det: int | None = None) -> list[Detection]:
        return detect(self, image, score_thr, nms_thr, max_det)


def detect(net: MitosRCNN, image, score_thr: float | None = None, nms_thr: float | None = None,
           max_det: int | None = None) -> list[Detection]:
    """Run the full cascade on one 3x299x299 image and return scored boxes.

    Each ROI is assigned its argmax class; background ROIs are discarded, the
    class-specific deltas are applied, and NMS runs separately per class.
    """
    cfg = net.config
    score_thr = cfg.score_threshold if score_thr is None else score_thr
    nms_thr = cfg.nms_threshold if nms_thr is None else nms_thr
    max_det = cfg.max_detections if max_det is None else max_det

    conv3, conv4 = net.features(image)
    out = net.proposals(conv3, conv4)
    rois = out["rpn2"][2]
    if len(rois) == 0:
        return []
    feats = roi_pool_boxes(out["fused"], rois, cfg.roi_size)
    probs, deltas = head_forward(feats, net.group("head"))
    p = probs.data
    cls = p.argmax(axis=1)
    score = p[np.arange(len(p)), cls]
    d = deltas.data.reshape(len(p), NUM_CLASSES, 4)[np.arange(len(p)), cls]
    boxes = clip_array(decode_array(rois, d), cfg.backbone.input_size)
    keep = (cls != ClassId.BACKGROUND) & (score >= score_thr) & (boxes[:, 2] > 0) & (boxes[:, 3] > 0)
    found: list[tuple[float, int, int]] = []
    for c in (ClassId.MITOTIC_FIGURE, ClassId.NOT_MITOTIC_FIGURE):
        idx = np.flatnonzero(keep & (cls == c))
        for k in nms(boxes[idx], score[idx], nms_thr):
            found.append((float(score[idx[k]]), int(idx[k]), int(c)))
    found.sort(key=lambda t: (-t[0], t[1]))
    return [Detection(Box(*boxes[i]), ClassId(c), s) for s, i, c in found[:max_det]]


# ---------------------------------------------------------------------------
# detection files
# ---------------------------------------------------------------------------

DETECTION_HEADER = "image,x,y,w,h,class,score"


def format_detections(image_id: str, detections: Sequence[Detection]) -> str:
    return "".join(
        f"{image_id},{d.box.x:.4f},{d.box.y:.4f},{d.box.w:.4f},{d.box.h:.4f},{d.class_id.label},{d.score:.6f}\n"
        for d in detections
    )


def write_detections(path, per_image: dict[str, Sequence[Detection]]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(DETECTION_HEADER + "\n")
        for image_id, dets in per_image.items():
            fh.write(format_detections(image_id, dets))


def read_detections(path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != DETECTION_HEADER:
            raise ValueError(f"{path}: expected header {DETECTION_HEADER!r}, got {header!r}")
        for lineno, line in enumerate(fh, 2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 7:
                raise ValueError(f"{path}:{lineno}: expected 7 fields, got {len(parts)}")
            image_id, x, y, w, h, label, score = parts
            try:
                det = Detection(Box(float(x), float(y), float(w), float(h)), ClassId.from_label(label), float(score))
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            out.setdefault(image_id, []).append(det)
    return out
