"""``mitos`` command line: synth, prepare, train, detect, eval, grade, bench.

Every subcommand takes ``--config`` (YAML), repeated ``--set key.path=value``
overrides, ``--seed``, ``--workers`` and ``--out``. The merged configuration
is written to ``<out>/effective_config.yaml``; feeding that file back through
``--config`` reproduces the run. Exit codes: 0 success, 2 input error,
3 numeric failure. ``MITOS_LOG`` sets the log level (default WARNING).
"""
from __future__ import annotations

import argparse
import copy
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
import yaml

from . import checkpoint as ckpt_io
from .boxes import Box
from .data import (INPUT_SIZE, ROTATIONS, DatasetManifest, HpfFrame, ManifestError, Provenance, SynthConfig,
                   load_manifest, load_png, record_from_frame, resize_to_input, rotate_augment, save_manifest,
                   save_png, stain_normalize, stain_stats, synth_generate, tile_frame, with_provenance)
from .detection import DetectorConfig, MitosRCNN, read_detections, write_detections
from .evaluation import evaluate_manifest, format_report, metrics, proliferation_grade, read_counts
from .optim import NonFiniteLossError, TrainConfig, train
from .records import Detection

logger = logging.getLogger("mitos_rcnn")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3
CONFIG_SNAPSHOT = "effective_config.yaml"
MANIFEST_NAME = "manifest.txt"


class InputError(Exception):
    """Bad user input: missing files, malformed config, version mismatch."""


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _plain(obj):
    """Tuples to lists, recursively, so the snapshot is plain YAML."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def default_config() -> dict:
    train_cfg = TrainConfig().to_dict()
    train_cfg.pop("seed")
    return _plain({
        "seed": 0,
        "detector": DetectorConfig().to_dict(),
        "train": train_cfg,
        "synth": asdict(SynthConfig()),
        "bench": {"runs": 5, "warmup": 1},
    })


def _merge(base: dict, extra: dict, where: str) -> dict:
    for k, v in extra.items():
        if k not in base:
            raise InputError(f"{where}: unknown config key {k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise InputError(f"{where}: {k!r} must be a mapping")
            _merge(base[k], v, f"{where}.{k}")
        else:
            base[k] = v
    return base


def apply_override(cfg: dict, assignment: str) -> None:
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise InputError(f"--set expects key.path=value, got {assignment!r}")
    parts = key.strip().split(".")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise InputError(f"--set: unknown config section {key!r}")
        node = node[p]
    if parts[-1] not in node or isinstance(node[parts[-1]], dict):
        raise InputError(f"--set: unknown config key {key!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise InputError(f"--set {key}: cannot parse value {raw!r}: {exc}") from None
    node[parts[-1]] = _yaml11_number(value)


def _yaml11_number(value):
    """YAML 1.1 reads ``1e-3`` (no dot) as a string; take it as the float it means."""
    if isinstance(value, str):
        try:
            return float(value)
        except ValueError:
            return value
    if isinstance(value, list):
        return [_yaml11_number(v) for v in value]
    return value


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then ``--set`` overrides, then ``--seed``."""
    cfg = default_config()
    if args.config:
        try:
            loaded = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise InputError(f"cannot read config {args.config}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise InputError(f"{args.config}: invalid YAML: {exc}") from None
        if not isinstance(loaded, dict):
            raise InputError(f"{args.config}: top level must be a mapping")
        loaded.pop("run", None)
        _merge(cfg, loaded, str(args.config))
    for assignment in args.set or ():
        apply_override(cfg, assignment)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if not isinstance(cfg["seed"], int):
        raise InputError(f"seed must be an integer, got {cfg['seed']!r}")
    return cfg


def detector_config(cfg: dict) -> DetectorConfig:
    try:
        return DetectorConfig.from_dict(copy.deepcopy(cfg["detector"]))
    except (TypeError, ValueError) as exc:
        raise InputError(f"detector config: {exc}") from None


def train_config(cfg: dict) -> TrainConfig:
    try:
        return TrainConfig(seed=cfg["seed"], **cfg["train"])
    except (TypeError, ValueError) as exc:
        raise InputError(f"train config: {exc}") from None


def synth_config(cfg: dict) -> SynthConfig:
    try:
        return SynthConfig(**cfg["synth"])
    except (TypeError, ValueError) as exc:
        raise InputError(f"synth config: {exc}") from None


def write_snapshot(out: Path, cfg: dict, args: argparse.Namespace) -> None:
    run = {"subcommand": args.command}
    for key in ("manifest", "checkpoint", "detections", "counts"):
        value = getattr(args, key, None)
        if value is not None:
            run[key] = str(value)
    snapshot = dict(cfg, run=run)
    (out / CONFIG_SNAPSHOT).write_text(yaml.safe_dump(_plain(snapshot), sort_keys=True), encoding="utf-8")


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _out_dir(path: str | None, default: str) -> Path:
    out = Path(path or default)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise InputError(f"output directory {out} is not writable: {exc.strerror}") from None
    return out


def _read_manifest(path: str) -> DatasetManifest:
    try:
        return load_manifest(path)
    except OSError as exc:
        raise InputError(f"cannot read manifest {path}: {exc.strerror}") from None


def _read_image(root: Path, rel: str) -> np.ndarray:
    path = root / rel
    if not path.is_file():
        raise InputError(f"missing image file: {path}")
    return load_png(path)


def _load_net(path: str) -> MitosRCNN:
    try:
        return MitosRCNN.from_checkpoint(ckpt_io.load(path))
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc.strerror}") from None


def _parallel_map(fn: Callable, items: Sequence, workers: int,
                  initializer: Callable | None = None, initargs: tuple = ()) -> list:
    """Ordered map; results come back in input order whatever the worker count."""
    if workers <= 1 or len(items) <= 1:
        if initializer is not None:
            initializer(*initargs)
        return [fn(x) for x in items]
    with ProcessPoolExecutor(max_workers=workers, initializer=initializer, initargs=initargs) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def _synth_one(job):
    index, seed, scfg = job
    frame, anns, info = synth_generate(scfg, np.random.default_rng([seed, index]))
    return frame, anns, info


def cmd_synth(args, cfg: dict) -> int:
    if args.n < 0:
        raise InputError(f"--n must be >= 0, got {args.n}")
    scfg = synth_config(cfg)
    out = _out_dir(args.out, "synth")
    write_snapshot(out, cfg, args)
    (out / "images").mkdir(exist_ok=True)
    jobs = [(i, cfg["seed"], scfg) for i in range(args.n)]
    records = []
    for i, (frame, anns, info) in enumerate(_parallel_map(_synth_one, jobs, args.workers)):
        rel = f"images/frame_{i:05d}.png"
        save_png(out / rel, frame.pixels)
        if any(info["shortfall"].values()):
            logger.warning("frame %d: could not place %s", i, info["shortfall"])
        records.append(record_from_frame(rel, frame, anns, Provenance(source=f"synth:{i}")))
    manifest = DatasetManifest(records, {"generator": "synth", "seed": str(cfg["seed"])})
    save_manifest(out / MANIFEST_NAME, manifest)
    print(f"wrote {len(records)} frames and {out / MANIFEST_NAME}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# prepare
# ---------------------------------------------------------------------------

def _prepare_one(job):
    """Tile, resize, rotate and stain-normalize one source record."""
    rec, root, flags, target = job
    pixels = _read_image(Path(root), rec.path)
    frame = HpfFrame(pixels, rec.resolution_um_per_px, rec.scanner_tag)
    stem = Path(rec.path).stem
    if flags["tile"]:
        pieces = [(f"{stem}_t{t:02d}", sub, anns, t) for t, (sub, anns, _, _) in
                  enumerate(tile_frame(frame, rec.annotations))]
    else:
        pieces = [(stem, frame, list(rec.annotations), rec.provenance.tile)]
    out = []
    for name, sub, anns, tile in pieces:
        px, anns, (sx, sy) = resize_to_input(sub.pixels, anns, INPUT_SIZE)
        prov = replace(rec.provenance, source=rec.path, tile=tile,
                       scale_x=rec.provenance.scale_x * sx, scale_y=rec.provenance.scale_y * sy)
        variants = [(name, px, anns, prov)]
        if flags["rotate"]:
            for angle in ROTATIONS:
                rpx, ranns = rotate_augment(px, anns, angle)
                # quarter turns swap the axes, and the per-axis scale with them
                rprov = replace(prov, rotation=angle)
                if angle in (90, 270):
                    rprov = replace(rprov, scale_x=prov.scale_y, scale_y=prov.scale_x)
                variants.append((f"{name}_r{angle:03d}", rpx, ranns, rprov))
        for vname, vpx, vanns, vprov in variants:
            if target is not None:
                vpx = stain_normalize(vpx, target)
                vprov = replace(vprov, stain_normalized=True)
            out.append((f"images/{vname}.png", vpx, vanns, vprov))
    return rec, out


def cmd_prepare(args, cfg: dict) -> int:
    manifest = _read_manifest(args.manifest)
    root = Path(args.manifest).parent
    out = _out_dir(args.out, "prepared")
    write_snapshot(out, cfg, args)
    (out / "images").mkdir(exist_ok=True)
    target = None
    if args.stain:
        if args.stain_target:
            target = stain_stats(_read_image(Path("."), args.stain_target))
        elif manifest.records:
            first = manifest.records[0]
            target = stain_stats(resize_to_input(_read_image(root, first.path), [], INPUT_SIZE)[0])
    flags = {"tile": args.tile, "rotate": args.rotate}
    for rec in manifest.records:
        if not (root / rec.path).is_file():
            raise InputError(f"missing image file: {root / rec.path}")
    jobs = [(rec, str(root), flags, target) for rec in manifest.records]
    records = []
    for rec, outputs in _parallel_map(_prepare_one, jobs, args.workers):
        for rel, px, anns, prov in outputs:
            save_png(out / rel, px)
            frame = HpfFrame(px, rec.resolution_um_per_px, rec.scanner_tag)
            records.append(with_provenance(record_from_frame(rel, frame, anns), **asdict(prov)))
    meta = dict(manifest.metadata)
    meta["prepared"] = "+".join(k for k in ("tile", "rotate", "stain") if getattr(args, k)) or "resize"
    try:
        save_manifest(out / MANIFEST_NAME, DatasetManifest(records, meta))
    except ManifestError as exc:
        raise InputError(str(exc)) from None
    print(f"wrote {len(records)} records to {out / MANIFEST_NAME}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def cmd_train(args, cfg: dict) -> int:
    manifest = _read_manifest(args.manifest)
    root = Path(args.manifest).parent
    for rec in manifest.records:
        if not (root / rec.path).is_file():
            raise InputError(f"missing image file: {root / rec.path}")
    dcfg, tcfg = detector_config(cfg), train_config(cfg)
    out = _out_dir(args.out, "run")
    write_snapshot(out, cfg, args)
    net = MitosRCNN.build(dcfg, seed=cfg["seed"], sigma=tcfg.init_sigma)
    with open(out / "loss_log.csv", "w", encoding="utf-8", newline="\n") as log:
        def sink(line: str) -> None:
            log.write(line + "\n")
        try:
            net, history = train(net, manifest, tcfg, sink, image_root=root, checkpoint_dir=out / "checkpoints")
        except NonFiniteLossError as exc:
            log.flush()
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
    meta = {"iteration": len(history), "train": tcfg.to_dict()}
    ckpt_io.save(out / "model.ckpt", net.to_checkpoint(meta))
    if history:
        print(f"trained {len(history)} iterations, final loss {history[-1].total:.4f}")
    print(f"wrote {out / 'model.ckpt'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# detect
# ---------------------------------------------------------------------------

_WORKER_NET: MitosRCNN | None = None


def _init_detector(path: str) -> None:
    global _WORKER_NET
    _WORKER_NET = _load_net(path)


def detect_image(net: MitosRCNN, pixels: np.ndarray) -> list[Detection]:
    """Detect on an image of any size; boxes come back in its own pixel frame."""
    n = net.config.backbone.input_size
    px, _, (sx, sy) = resize_to_input(pixels, [], n)
    found = net.detect(px)
    if (sx, sy) == (1.0, 1.0):
        return found
    return [Detection(Box(d.box.x / sx, d.box.y / sy, d.box.w / sx, d.box.h / sy), d.class_id, d.score)
            for d in found]


def _detect_one(job):
    root, rel = job
    return detect_image(_WORKER_NET, _read_image(Path(root), rel))


def cmd_detect(args, cfg: dict) -> int:
    manifest = _read_manifest(args.manifest)
    root = Path(args.manifest).parent
    for rec in manifest.records:
        if not (root / rec.path).is_file():
            raise InputError(f"missing image file: {root / rec.path}")
    _load_net(args.checkpoint)  # fail early on a bad checkpoint
    out = _out_dir(args.out, "detections")
    write_snapshot(out, cfg, args)
    jobs = [(str(root), rec.path) for rec in manifest.records]
    results = _parallel_map(_detect_one, jobs, args.workers, _init_detector, (args.checkpoint,))
    per_image = {rec.path: dets for rec, dets in zip(manifest.records, results)}
    write_detections(out / "detections.csv", per_image)
    print(f"wrote {sum(map(len, results))} detections for {len(results)} images to {out / 'detections.csv'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval / grade / bench
# ---------------------------------------------------------------------------

def cmd_eval(args, cfg: dict) -> int:
    out = _out_dir(args.out, "eval")
    write_snapshot(out, cfg, args)
    if args.counts:
        try:
            counts = read_counts(Path(args.counts).read_text(encoding="utf-8"))
        except OSError as exc:
            raise InputError(f"cannot read counts file {args.counts}: {exc.strerror}") from None
        report = metrics(counts)
        title = f"counts from {Path(args.counts).name}"
    else:
        if not (args.manifest and args.detections):
            raise InputError("eval needs --manifest and --detections, or --counts")
        manifest = _read_manifest(args.manifest)
        try:
            detections = read_detections(args.detections)
        except OSError as exc:
            raise InputError(f"cannot read detections {args.detections}: {exc.strerror}") from None
        report = evaluate_manifest(detections, manifest)
        # file names only: full paths live in the snapshot and would make reruns differ
        title = f"{Path(args.detections).name} against {Path(args.manifest).name}"
    text = format_report(report, title)
    (out / "report.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_grade(args, cfg: dict) -> int:
    counts = list(args.count)
    if args.report:
        try:
            text = Path(args.report).read_text(encoding="utf-8")
        except OSError as exc:
            raise InputError(f"cannot read report {args.report}: {exc.strerror}") from None
        c = read_counts(text)
        counts.append(c.tp + c.fp)
    if not counts:
        raise InputError("grade needs at least one mitotic count or --report")
    for n in counts:
        if n < 0:
            raise InputError(f"mitotic count cannot be negative: {n}")
        print(f"{n} mitoses per 10 HPFs: {proliferation_grade(n).value}")
    return EXIT_OK


def cmd_bench(args, cfg: dict) -> int:
    bcfg = cfg["bench"]
    runs, warmup = int(bcfg["runs"]), int(bcfg["warmup"])
    if runs < 1 or warmup < 0:
        raise InputError(f"bench needs runs >= 1 and warmup >= 0, got {runs}, {warmup}")
    net = _load_net(args.checkpoint) if args.checkpoint else MitosRCNN.build(detector_config(cfg), cfg["seed"])
    if args.manifest:
        manifest = _read_manifest(args.manifest)
        if not manifest.records:
            raise InputError("bench manifest is empty")
        rec = manifest.records[0]
        pixels = _read_image(Path(args.manifest).parent, rec.path)
    else:
        frame, _, _ = synth_generate(synth_config(cfg), np.random.default_rng(cfg["seed"]))
        pixels = frame.pixels
    out = _out_dir(args.out, "bench")
    write_snapshot(out, cfg, args)
    for _ in range(warmup):
        detect_image(net, pixels)
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        detect_image(net, pixels)
        times.append(time.perf_counter() - t0)
    mean = float(np.mean(times))
    text = (f"runs={runs}\nwarmup={warmup}\nmean_seconds_per_hpf={mean:.6f}\n"
            f"min_seconds_per_hpf={min(times):.6f}\nmax_seconds_per_hpf={max(times):.6f}\n")
    (out / "bench.txt").write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

COMMANDS = {
    "synth": cmd_synth, "prepare": cmd_prepare, "train": cmd_train, "detect": cmd_detect,
    "eval": cmd_eval, "grade": cmd_grade, "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file (an effective_config.yaml works too)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.phases=[[200,0.001]]")
    common.add_argument("--seed", type=int, help="master seed (default: config value, else 0)")
    common.add_argument("--workers", type=int, default=1, help="worker processes for per-image stages")
    common.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(prog="mitos", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate synthetic HPF frames")
    p.add_argument("--n", type=int, default=10, help="number of frames")

    p = sub.add_parser("prepare", parents=[common], help="tile, resize, rotate and stain-normalize a dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--tile", action="store_true", help="split each frame into a 4x4 grid")
    p.add_argument("--rotate", action="store_true", help="add 90/180/270 degree copies")
    p.add_argument("--stain", action="store_true", help="normalize colour statistics")
    p.add_argument("--stain-target", help="reference image (default: first record)")

    p = sub.add_parser("train", parents=[common], help="train a detector")
    p.add_argument("--manifest", required=True)

    p = sub.add_parser("detect", parents=[common], help="run a trained detector")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("eval", parents=[common], help="score detections with the 8 um criterion")
    p.add_argument("--manifest")
    p.add_argument("--detections")
    p.add_argument("--counts", help="key=value file with tp, fp and fn")

    p = sub.add_parser("grade", parents=[common], help="map mitotic counts to a proliferation grade")
    p.add_argument("count", type=int, nargs="*", help="mitoses per 10 HPFs")
    p.add_argument("--report", help="eval report; grades its predicted count (tp + fp)")

    p = sub.add_parser("bench", parents=[common], help="time detection per HPF")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("MITOS_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv: Iterable[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(None if argv is None else list(argv))
    try:
        if args.workers < 1:
            raise InputError(f"--workers must be >= 1, got {args.workers}")
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (InputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ArithmeticError, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
