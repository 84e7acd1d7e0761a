"""Command-line entry point: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage error, 2 data error (missing/unreadable input,
invalid content, impossible request).  Every run records itself in a
``manifest.json`` next to its output (or at ``--manifest``).
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import platform
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .bench import MASK_PROTOCOLS, MOTIFS, OCCLUDERS, SynthSpec, evaluate, make_mask, synth
from .detect import DetectionError, detect
from .geometry import DisplacementPair, chamfer_periodicity_error, lattice_cloud
from .raster import ImageFormatError, load_image, load_mask, save_image, save_mask
from .train import ABLATIONS, TrainConfig

SCHEMA = 1
EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


@dataclass
class RunConfig:
    """Training configuration plus task parameters; serialised flat with a schema tag."""

    train: TrainConfig = field(default_factory=TrainConfig)
    deterministic: bool = True
    eps1: float = 0.15
    eps2: float = 0.3
    sigma_weight: float = 0.3
    blur_window: int = 16
    blur_threshold: float | None = None
    segment_lambda_c: float = 5.0
    remap_lambda_c: float = 10.0

    def to_json(self) -> dict:
        out = {"schema": SCHEMA, **self.train.to_json()}
        for f in dataclasses.fields(self):
            if f.name != "train":
                out[f.name] = getattr(self, f.name)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "RunConfig":
        obj = dict(obj)
        schema = obj.pop("schema", SCHEMA)
        if schema != SCHEMA:
            raise ValueError(f"unsupported config schema {schema}")
        own = {f.name for f in dataclasses.fields(cls)} - {"train"}
        task = {k: obj.pop(k) for k in list(obj) if k in own}
        return cls(train=TrainConfig.from_json(obj), **task)

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    import scipy

    return {"nppnet": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _write_json(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _record(args, stage: str, inputs: dict, outputs: dict, cfg: RunConfig | None = None, metrics=None) -> None:
    """Add or replace this stage's entry in the manifest (no timestamps, so reruns are byte-identical)."""
    out_path = next(iter(outputs.values()), None)
    path = Path(args.manifest) if args.manifest else Path(out_path).parent / "manifest.json"
    manifest = {"schema": SCHEMA, "stages": {}}
    if path.exists():
        try:
            manifest = json.loads(path.read_text())
        except json.JSONDecodeError:
            pass
    manifest.setdefault("stages", {})
    entry = {
        "inputs": {k: {"path": str(v), "sha256": _sha256(v)} for k, v in inputs.items() if v},
        "outputs": {k: {"path": str(v), "sha256": _sha256(v)} for k, v in outputs.items() if v},
        "config_hash": cfg.digest() if cfg else None,
        "seed": cfg.train.seed if cfg else getattr(args, "seed", None),
        "versions": _versions(),
        "metrics": metrics or {},
    }
    entry["stage_hash"] = hashlib.sha256(json.dumps(entry, sort_keys=True).encode()).hexdigest()
    manifest["stages"][stage] = entry
    _write_json(manifest, path)


def _threads(args) -> int:
    if getattr(args, "threads", None):
        return int(args.threads)
    env = os.environ.get("NPP_THREADS")
    if env:
        try:
            return max(int(env), 1)
        except ValueError:
            raise UsageError(f"NPP_THREADS must be an integer, got {env!r}")
    return 1


def _load_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        try:
            cfg = RunConfig.from_json(json.loads(Path(args.config).read_text()))
        except FileNotFoundError:
            raise DataError(f"config file not found: {args.config}")
        except (json.JSONDecodeError, TypeError, ValueError) as exc:
            raise DataError(f"invalid config {args.config}: {exc}")
    train = cfg.train
    if getattr(args, "seed", None) is not None:
        train = train.replace(seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        train = train.replace(epochs=args.epochs)
    if getattr(args, "deterministic", False):
        cfg.deterministic = True
    threads = _threads(args)
    train = train.replace(threads=1 if cfg.deterministic else threads)
    cfg.train = train
    return cfg


def _image(path):
    try:
        return load_image(path)
    except FileNotFoundError:
        raise DataError(f"image not found: {path}")
    except ImageFormatError as exc:
        raise DataError(f"cannot read image {path}: {exc}")


def _mask(path, shape, default=True):
    if not path:
        return np.full(shape, default, bool)
    try:
        mask = load_mask(path)
    except FileNotFoundError:
        raise DataError(f"mask not found: {path}")
    except ImageFormatError as exc:
        raise DataError(f"cannot read mask {path}: {exc}")
    if mask.shape != tuple(shape):
        raise DataError(f"mask {path} is {mask.shape}, image is {tuple(shape)}")
    return mask


def _pair(text: str):
    try:
        x, y = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'dx,dy', got {text!r}")
    return (x, y)


# --- subcommands --------------------------------------------------------------

def cmd_synth(args):
    try:
        spec = SynthSpec(args.motif, DisplacementPair(args.d1, args.d2), args.width, args.height, args.ramp,
                         args.jitter, args.occluder, args.seed, args.channels)
        img, pair, nonper = synth(spec)
    except ValueError as exc:
        raise DataError(str(exc))
    save_image(img, args.out)
    outputs = {"image": args.out}
    if args.nonperiodic_out:
        save_mask(~nonper, args.nonperiodic_out)
        outputs["periodic_mask"] = args.nonperiodic_out
    if args.pair_out:
        _write_json({"schema": SCHEMA, **pair.to_json()}, args.pair_out)
        outputs["pair"] = args.pair_out
    _record(args, "synth", {}, outputs, metrics={"pair": pair.to_json()})


def cmd_make_mask(args):
    width, height = args.width, args.height
    if args.like:
        img = _image(args.like)
        height, width = img.shape[:2]
    if not width or not height:
        raise UsageError("give --width/--height or --like")
    try:
        known = make_mask(args.protocol, width, height, args.seed, args.frac)
    except ValueError as exc:
        raise DataError(str(exc))
    save_mask(known, args.out)
    _record(args, "make-mask", {"like": args.like}, {"mask": args.out},
            metrics={"unknown_fraction": float((~known).mean())})


def cmd_detect(args):
    img = _image(args.image)
    valid = _mask(args.mask, img.shape[:2])
    try:
        res = detect(img, valid, args.q, return_score=True)
    except DetectionError as exc:
        raise DataError(str(exc))
    _write_json({"schema": SCHEMA, "q": args.q, **res.to_json()}, args.out)
    _record(args, "detect", {"image": args.image, "mask": args.mask}, {"result": args.out},
            metrics={"score": res.score})


def cmd_propose(args):
    from .proposal import search_periodicities

    cfg = _load_config(args)
    img = _image(args.image)
    valid = _mask(args.mask, img.shape[:2])
    try:
        props = search_periodicities(img, valid, cfg.train)
    except ValueError as exc:
        raise DataError(str(exc))
    out = {"schema": SCHEMA, "method": props.method, "K_effective": props.k_effective(cfg.train.top_k),
           "candidates": props.to_json()}
    _write_json(out, args.out)
    outputs = {"candidates": args.out}
    if args.plot:
        from .plotting import plot_proposals

        plot_proposals(img, valid, props, args.plot)
        outputs["plot"] = args.plot
    _record(args, "propose", {"image": args.image, "mask": args.mask}, outputs, cfg,
            metrics={"K_effective": out["K_effective"]})


def cmd_complete(args):
    from .tasks import refine
    from .train import complete

    cfg = _load_config(args)
    if args.ablation:
        cfg.train = cfg.train.replace(ablation=args.ablation)
    img = _image(args.image)
    known = _mask(args.mask, img.shape[:2])
    if not known.any():
        raise DataError("mask has no known pixels")
    metrics = {}
    try:
        if args.refine:
            res = refine(img, ~known, cfg.train)
            out = res.image
            metrics["passes"] = res.passes
        else:
            details = complete(img, ~known, cfg.train, return_details=True)
            out = details.image
            metrics["variant"] = details.variant
            if args.checkpoint and details.train is not None:
                details.train.model.save(args.checkpoint)
    except ValueError as exc:
        raise DataError(str(exc))
    save_image(out, args.out)
    outputs = {"image": args.out}
    if args.checkpoint and Path(args.checkpoint).exists():
        outputs["checkpoint"] = args.checkpoint
    _record(args, "complete", {"image": args.image, "mask": args.mask}, outputs, cfg, metrics)


def cmd_segment(args):
    from .tasks import segment

    cfg = _load_config(args)
    img = _image(args.image)
    initial = None
    if args.initial:
        initial = ~_mask(args.initial, img.shape[:2])
    try:
        res = segment(img, initial, cfg.eps1, cfg.eps2, cfg.train.replace(lambda_c=cfg.segment_lambda_c))
    except ValueError as exc:
        raise DataError(str(exc))
    save_mask(res.periodic, args.out)
    summary = {"schema": SCHEMA, "relabeled_fraction": res.relabeled_fraction,
               "decision": "npp" if res.relabeled_fraction > 0.5 else "non_npp"}
    outputs = {"labels": args.out}
    if args.json:
        _write_json(summary, args.json)
        outputs["summary"] = args.json
    _record(args, "segment", {"image": args.image, "initial": args.initial}, outputs, cfg, summary)


def cmd_classify(args):
    from .tasks import classify

    cfg = _load_config(args)
    img = _image(args.image)
    unknown = ~_mask(args.mask, img.shape[:2])
    try:
        res = classify(img, unknown, cfg.train.replace(lambda_c=cfg.segment_lambda_c), cfg.eps1, cfg.eps2)
    except ValueError as exc:
        raise DataError(str(exc))
    summary = {"schema": SCHEMA, **res.to_json()}
    _write_json(summary, args.out)
    _record(args, "classify", {"image": args.image, "mask": args.mask}, {"result": args.out}, cfg, summary)


def cmd_remap(args):
    from .tasks import detect_blur, remap_recover

    cfg = _load_config(args)
    img = _image(args.image)
    if args.blur:
        blur = ~_mask(args.blur, img.shape[:2])
    else:
        blur = detect_blur(img, cfg.blur_window, cfg.blur_threshold)
    sigma = cfg.sigma_weight if args.sigma_weight is None else args.sigma_weight
    try:
        out = remap_recover(img, blur, sigma, cfg.train.replace(lambda_c=cfg.remap_lambda_c))
    except ValueError as exc:
        raise DataError(str(exc))
    save_image(out, args.out)
    _record(args, "remap", {"image": args.image, "blur": args.blur}, {"image": args.out}, cfg,
            {"blur_fraction": float(blur.mean())})


def cmd_eval(args):
    pred = _image(args.pred)
    truth = _image(args.truth)
    if pred.shape != truth.shape:
        raise DataError(f"prediction {pred.shape} and truth {truth.shape} differ in shape")
    known = _mask(args.mask, truth.shape[:2]) if args.mask else None
    per_err = None
    if args.pair and args.truth_pair:
        a = DisplacementPair.from_json(json.loads(Path(args.pair).read_text()))
        b = DisplacementPair.from_json(json.loads(Path(args.truth_pair).read_text()))
        h, w = truth.shape[:2]
        per_err = chamfer_periodicity_error(lattice_cloud(a, (0, 0), w, h), lattice_cloud(b, (0, 0), w, h))
    reports = evaluate(pred, truth, known, per_err)
    out = {"schema": SCHEMA, **{k: v.to_json() for k, v in reports.items()}}
    _write_json(out, args.out)
    outputs = {"report": args.out}
    if args.plot:
        from .plotting import plot_eval

        plot_eval(pred, truth, known, reports, args.plot)
        outputs["plot"] = args.plot
    _record(args, "eval", {"pred": args.pred, "truth": args.truth, "mask": args.mask}, outputs,
            metrics={k: v.to_json() for k, v in reports.items()})


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nppnet", description="Near-periodic pattern completion and analysis.")
    p.add_argument("--version", action="version", version=f"nppnet {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        sp.add_argument("--manifest", help="manifest path (default: manifest.json next to the output)")
        if config:
            sp.add_argument("--config", help="RunConfig JSON")
            sp.add_argument("--seed", type=int)
            sp.add_argument("--threads", type=int, help="worker threads (default: $NPP_THREADS or 1)")
            sp.add_argument("--deterministic", action="store_true", help="single worker, ordered reductions")

    sp = sub.add_parser("synth", help="render a synthetic near-periodic image")
    sp.add_argument("--motif", choices=MOTIFS, default="blobs")
    sp.add_argument("--d1", type=_pair, default=(16, 0))
    sp.add_argument("--d2", type=_pair, default=(0, 16))
    sp.add_argument("--width", type=int, default=128)
    sp.add_argument("--height", type=int, default=128)
    sp.add_argument("--ramp", type=float, default=0.0)
    sp.add_argument("--jitter", type=float, default=0.0)
    sp.add_argument("--occluder", choices=OCCLUDERS, default="none")
    sp.add_argument("--channels", type=int, choices=(1, 3), default=3)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.add_argument("--nonperiodic-out", help="write the periodic-pixel mask (occluder = unknown)")
    sp.add_argument("--pair-out", help="write the ground-truth displacement pair JSON")
    common(sp, config=False)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("make-mask", help="known-pixel mask following a benchmark protocol")
    sp.add_argument("--protocol", choices=MASK_PROTOCOLS, default="center")
    sp.add_argument("--width", type=int)
    sp.add_argument("--height", type=int)
    sp.add_argument("--like", help="take the size from this image")
    sp.add_argument("--frac", type=float, default=0.5, help="box side fraction for the center protocol")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    common(sp, config=False)
    sp.set_defaults(func=cmd_make_mask)

    sp = sub.add_parser("detect", help="best displacement pair in the ring R(q)")
    sp.add_argument("--image", required=True)
    sp.add_argument("--mask")
    sp.add_argument("--q", type=int, default=3)
    sp.add_argument("--out", required=True)
    common(sp, config=False)
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("propose", help="ranked periodicity candidates")
    sp.add_argument("--image", required=True)
    sp.add_argument("--mask")
    sp.add_argument("--out", required=True)
    sp.add_argument("--plot", help="write a PNG figure of the top candidates")
    common(sp)
    sp.set_defaults(func=cmd_propose)

    sp = sub.add_parser("complete", help="fill the unknown region of an image")
    sp.add_argument("--image", required=True)
    sp.add_argument("--mask", required=True, help="known-pixel mask (white = known)")
    sp.add_argument("--out", required=True)
    sp.add_argument("--ablation", choices=ABLATIONS)
    sp.add_argument("--refine", action="store_true", help="second pass for masks above 40%%")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--checkpoint", help="save the trained model")
    common(sp)
    sp.set_defaults(func=cmd_complete)

    sp = sub.add_parser("segment", help="periodic / non-periodic segmentation")
    sp.add_argument("--image", required=True)
    sp.add_argument("--initial", help="mask whose black pixels are the initial non-periodic region")
    sp.add_argument("--out", required=True, help="label map (255 = periodic)")
    sp.add_argument("--json", help="summary JSON")
    sp.add_argument("--epochs", type=int)
    common(sp)
    sp.set_defaults(func=cmd_segment)

    sp = sub.add_parser("classify", help="NPP vs non-NPP decision")
    sp.add_argument("--image", required=True)
    sp.add_argument("--mask", help="known-pixel mask")
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int)
    common(sp)
    sp.set_defaults(func=cmd_classify)

    sp = sub.add_parser("remap", help="re-synthesise blurry regions")
    sp.add_argument("--image", required=True)
    sp.add_argument("--blur", help="mask whose black pixels are blurry (detected when omitted)")
    sp.add_argument("--sigma-weight", type=float)
    sp.add_argument("--out", required=True)
    sp.add_argument("--epochs", type=int)
    common(sp)
    sp.set_defaults(func=cmd_remap)

    sp = sub.add_parser("eval", help="RMSE / PSNR / SSIM report")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--truth", required=True)
    sp.add_argument("--mask", help="known-pixel mask; adds an unknown-only report")
    sp.add_argument("--pair", help="proposed displacement pair JSON")
    sp.add_argument("--truth-pair", help="ground-truth displacement pair JSON")
    sp.add_argument("--out", required=True)
    sp.add_argument("--plot", help="write a PNG figure")
    common(sp, config=False)
    sp.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"nppnet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DetectionError, ImageFormatError, FileNotFoundError) as exc:
        print(f"nppnet: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
