"""``versediff`` command line: synth / train / sample / eval.

Exit codes: 0 success, 2 usage error (unknown subcommand or flag),
3 missing input, 4 config-schema violation, 5 data error, 6 runtime failure.
Failures print one line ``versediff: error[<category>]: <message>`` on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import Config, ConfigError, load_config

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_CONFIG = 4
EXIT_DATA = 5
EXIT_RUNTIME = 6

log = logging.getLogger("versediff")


class CLIError(Exception):
    def __init__(self, category: str, code: int, message: str):
        super().__init__(message)
        self.category = category
        self.code = code


def missing(message: str) -> CLIError:
    return CLIError("missing-input", EXIT_MISSING, message)


@dataclass
class RunManifest:
    subcommand: str
    config: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    dataset_fingerprint: str | None = None
    artifacts: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0
    exit_status: int = 0
    error: str | None = None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# flag -> dotted config key, per subcommand; paths live under "io."
FLAGS = {
    "synth": [
        ("--out", "io.out", str),
        ("--count", "synth.count", int),
        ("--seed", "synth.seed", int),
        ("--height", "synth.height", int),
        ("--width", "synth.width", int),
        ("--vertebrae", "synth.vertebrae", int),
        ("--occlude", "synth.occlude", float),
    ],
    "train": [
        ("--data", "io.data", str),
        ("--out", "io.out", str),
        ("--epochs", "train.epochs", int),
        ("--batch-size", "train.batch_size", int),
        ("--lr", "train.learning_rate", float),
        ("--seed", "train.seed", int),
        ("--max-steps", "train.max_steps", int),
    ],
    "sample": [
        ("--checkpoint", "io.checkpoint", str),
        ("--image", "io.image", str),
        ("--data", "io.data", str),
        ("--split", "io.split", str),
        ("--out", "io.out", str),
        ("--n", "sample.n", int),
        ("--seed", "sample.seed", int),
        ("--fusion", "sample.fusion", str),
    ],
    "eval": [
        ("--pred", "io.pred", str),
        ("--gt", "io.gt", str),
        ("--report", "io.report", str),
        ("--split", "io.split", str),
        ("--score", "io.score", str),
    ],
}

IO_DEFAULTS = {"io.score": "fused", "io.split": None}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"versediff: error[usage]: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="versediff", description="Diffusion-based spine segmentation with a shape prior.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", metavar="{synth,train,sample,eval}", parser_class=_Parser)
    helps = {
        "synth": "write a synthetic phantom dataset",
        "train": "train a denoiser on a dataset directory",
        "sample": "ensemble-sample masks for an image or a dataset split",
        "eval": "score predicted masks against ground truth",
    }
    for name, flags in FLAGS.items():
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="INI config file with dotted keys ([section] key = value)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
        p.add_argument("--manifest", help="where to write the run manifest")
        p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")
        for flag, key, typ in flags:
            kw = {"choices": ["fused", "best", "average"]} if key == "io.score" else {}
            p.add_argument(flag, dest=key, type=typ, default=None, help=f"config key {key}", **kw)
    return ap


def resolve(args) -> tuple[Config, dict]:
    """Defaults < config file < --set < dedicated flags."""
    values = {}
    if args.config:
        if not Path(args.config).is_file():
            raise missing(f"config file {args.config} not found")
        from .config import read_ini

        values.update(read_ini(args.config))
    for kv in args.set:
        if "=" not in kv:
            raise CLIError("config-error", EXIT_CONFIG, f"--set expects KEY=VALUE, got {kv!r}")
        k, v = kv.split("=", 1)
        values[k.strip()] = v.strip()
    for _, key, _ in FLAGS[args.command]:
        v = getattr(args, key)
        if v is not None:
            values[key] = v
    io = dict(IO_DEFAULTS)
    io.update({k: v for k, v in values.items() if k.startswith("io.")})
    known_io = {key for _, key, _ in FLAGS[args.command]}
    for k in io:
        if k not in known_io and k not in IO_DEFAULTS:
            raise CLIError("config-error", EXIT_CONFIG, f"unknown config key {k!r} for {args.command}")
    try:
        cfg = load_config(None, {k: v for k, v in values.items() if not k.startswith("io.")})
    except ConfigError as exc:
        raise CLIError("config-error", EXIT_CONFIG, str(exc)) from exc
    return cfg, io


def _require(io: dict, key: str, flag: str) -> str:
    if not io.get(key):
        raise missing(f"{flag} is required")
    return io[key]


# -- subcommands -------------------------------------------------------------


def cmd_synth(cfg: Config, io: dict, man: RunManifest) -> None:
    from .dataio import generate_phantom, write_dataset
    from .io import fingerprint

    out = Path(_require(io, "io.out", "--out"))
    s = cfg.synth
    samples = generate_phantom(s.seed, s.count, s.height, s.width, s.vertebrae, s.occlude)
    params = {"count": s.count, "seed": s.seed, "height": s.height, "width": s.width,
              "vertebrae": s.vertebrae, "occlude_prob": s.occlude}
    manifest = {"generator": "phantom", "parameters": params, "ids": [x.id for x in samples],
                "occluded": [x.id for x in samples if x.meta["occluded"]]}
    write_dataset(out, samples, manifest)
    man.seeds = {"synth": s.seed}
    man.dataset_fingerprint = fingerprint(out)
    man.artifacts = {"dataset": str(out), "manifest": str(out / "manifest.json")}


def _load_data(path: str):
    from .dataio import load_dataset
    from .io import fingerprint

    root = Path(path)
    if not (root / "images").is_dir():
        raise missing(f"{root} has no images/ directory")
    try:
        return load_dataset(root), fingerprint(root)
    except FileNotFoundError as exc:
        raise missing(str(exc)) from exc
    except ValueError as exc:
        raise CLIError("data-error", EXIT_DATA, str(exc)) from exc


def cmd_train(cfg: Config, io: dict, man: RunManifest) -> None:
    from .dataio import split
    from .io import atomic_write_json, atomic_write_text
    from .trainer import TrainingDiverged, fit

    samples, fp = _load_data(_require(io, "io.data", "--data"))
    out = Path(_require(io, "io.out", "--out"))
    train_set, test_set = split(samples, cfg.data.train_frac, cfg.data.split_seed)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_json(out / "split.json", {
        "train_frac": cfg.data.train_frac, "seed": cfg.data.split_seed,
        "train": [s.id for s in train_set], "test": [s.id for s in test_set],
    })
    atomic_write_text(out / "config.ini", cfg.to_ini())
    man.dataset_fingerprint = fp
    man.seeds = {"train": cfg.train.seed, "augment": cfg.augment.seed, "split": cfg.data.split_seed}
    man.artifacts = {"checkpoint": str(out / "checkpoint"), "split": str(out / "split.json"),
                     "config": str(out / "config.ini")}
    try:
        ckpt = fit(train_set, cfg, out_dir=out)
    except TrainingDiverged as exc:
        raise CLIError("training-diverged", EXIT_RUNTIME, str(exc)) from exc
    man.artifacts["loss_stats"] = ckpt.loss_stats()


def _write_sample_set(out: Path, ss) -> dict:
    from .io import atomic_write_json, write_png

    write_png(out / "mask_fused.png", (ss.fused > 0).astype(np.uint8) * 255)
    for i, m in enumerate(ss.masks):
        write_png(out / f"mask_{i}.png", (m > 0).astype(np.uint8) * 255)
    vmax = float(ss.variance_map.max())
    scale = vmax if vmax > 0 else 1.0
    write_png(out / "variance.png", np.rint(ss.variance_map / scale * 255.0).astype(np.uint8))
    atomic_write_json(out / "variance.json", {
        "scale": scale, "max_variance": vmax,
        "decode": "variance = png_value / 255 * scale",
    })
    return {"fused": str(out / "mask_fused.png"), "members": ss.n, "variance": str(out / "variance.png")}


def cmd_sample(cfg: Config, io: dict, man: RunManifest) -> None:
    from .io import from_uint8, read_png
    from .sampler import SamplingError, sample_many
    from .trainer import Checkpoint

    ck_path = Path(_require(io, "io.checkpoint", "--checkpoint"))
    if not (ck_path / "manifest.json").is_file():
        raise missing(f"{ck_path} is not a checkpoint directory")
    out = Path(_require(io, "io.out", "--out"))
    ckpt = Checkpoint.load(ck_path)
    model, schedule = ckpt.build_model(), ckpt.schedule()
    coding = ckpt.config.data.label_coding
    if io.get("io.image"):
        img_path = Path(io["io.image"])
        if not img_path.is_file():
            raise missing(f"image {img_path} not found")
        ids, images = [None], [from_uint8(read_png(img_path))[None]]
        man.dataset_fingerprint = hashlib.sha256(img_path.read_bytes()).hexdigest()
    elif io.get("io.data"):
        samples, man.dataset_fingerprint = _load_data(io["io.data"])
        if io.get("io.split"):
            split_path = Path(io["io.split"])
            if not split_path.is_file():
                raise missing(f"split file {split_path} not found")
            keep = set(json.loads(split_path.read_text())["test"])
            samples = [s for s in samples if s.id in keep]
        ids, images = [s.id for s in samples], [s.image for s in samples]
    else:
        raise missing("one of --image or --data is required")
    sc = cfg.sample
    try:
        sets = sample_many(images, model, schedule, sc.n, sc.seed, sc.fusion, sc.threshold, coding, sc.chunk)
    except SamplingError as exc:
        raise CLIError("sampling-failed", EXIT_RUNTIME, str(exc)) from exc
    man.seeds = {"sample": sc.seed, "members": [sc.seed + i for i in range(sc.n)]}
    for sid, ss in zip(ids, sets):
        target = out if sid is None else out / sid
        man.artifacts[sid or "image"] = _write_sample_set(target, ss)


def _mask_dir_index(root: Path) -> dict:
    """id -> mask source for a ground-truth or prediction directory."""
    if (root / "images").is_dir():
        from .dataio import load_dataset

        return {s.id: s.mask for s in load_dataset(root)}
    index = {}
    for p in sorted(root.iterdir()):
        if p.is_file() and p.suffix == ".png":
            index[p.stem] = p
        elif p.is_dir() and (p / "mask_fused.png").is_file():
            index[p.name] = p
    return index


def _read_mask(src) -> np.ndarray:
    from .io import read_png

    if isinstance(src, np.ndarray):
        return src
    return (read_png(src) > 127).astype(np.uint8)


def _pred_masks(src: Path, score: str) -> list[np.ndarray]:
    if src.is_file():
        if score != "fused":
            raise missing(f"{src}: --score {score} needs per-member masks (<id>/mask_<i>.png)")
        return [_read_mask(src)]
    if score == "fused":
        return [_read_mask(src / "mask_fused.png")]
    members = sorted(src.glob("mask_[0-9]*.png"), key=lambda p: int(p.stem.split("_")[1]))
    if not members:
        raise missing(f"{src}: no member masks for --score {score}")
    return [_read_mask(p) for p in members]


def cmd_eval(cfg: Config, io: dict, man: RunManifest) -> None:
    from .io import atomic_write_json
    from .metrics import aggregate, dice, iou

    pred_root = Path(_require(io, "io.pred", "--pred"))
    gt_root = Path(_require(io, "io.gt", "--gt"))
    report_path = Path(_require(io, "io.report", "--report"))
    for root in (pred_root, gt_root):
        if not root.is_dir():
            raise missing(f"{root} is not a directory")
    gt = _mask_dir_index(gt_root)
    if io.get("io.split"):
        split_path = Path(io["io.split"])
        if not split_path.is_file():
            raise missing(f"split file {split_path} not found")
        keep = json.loads(split_path.read_text())["test"]
        gt = {k: gt[k] for k in keep if k in gt}
    pred = _mask_dir_index(pred_root)
    if not gt:
        raise missing(f"no ground-truth masks under {gt_root}")
    absent = [k for k in gt if k not in pred]
    if absent:
        raise missing(f"no prediction for {len(absent)} subject(s), e.g. {absent[0]}")
    score = io.get("io.score") or "fused"
    pairs, member_rows = [], []
    for sid, src in gt.items():
        g = _read_mask(src)
        preds = _pred_masks(pred[sid], score) if not isinstance(pred[sid], np.ndarray) else [pred[sid]]
        for p in preds:
            if p.shape != g.shape:
                raise CLIError("data-error", EXIT_DATA, f"{sid}: prediction {p.shape} vs ground truth {g.shape}")
        if score == "best":
            best = max(preds, key=lambda p: dice(p, g))
            pairs.append((best, g, sid))
        elif score == "average":
            member_rows.append({"id": sid, "dice": float(np.mean([dice(p, g) for p in preds])),
                                "iou": float(np.mean([iou(p, g) for p in preds]))})
        else:
            pairs.append((preds[0], g, sid))
    if score == "average":
        report = {"per_subject": member_rows,
                  "mean_dice": float(np.mean([r["dice"] for r in member_rows])),
                  "mean_iou": float(np.mean([r["iou"] for r in member_rows]))}
    else:
        report = aggregate(pairs).to_dict()
    report["score"] = score
    atomic_write_json(report_path, report)
    man.artifacts = {"report": str(report_path)}
    log.info("mean dice %.4f  mean iou %.4f over %d subjects", report["mean_dice"], report["mean_iou"],
             len(report["per_subject"]))


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "sample": cmd_sample, "eval": cmd_eval}


def _manifest_path(args, io: dict) -> Path | None:
    if args.manifest:
        return Path(args.manifest)
    if args.command == "eval" and io.get("io.report"):
        rp = Path(io["io.report"])
        return rp.with_name(rp.stem + ".manifest.json")
    if io.get("io.out"):
        return Path(io["io.out"]) / "run_manifest.json"
    return None


def _configure_threads() -> None:
    raw = os.environ.get("VERSEDIFF_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise CLIError("config-error", EXIT_CONFIG, f"VERSEDIFF_THREADS must be an integer, got {raw!r}")
    if n > 0:
        import torch

        torch.set_num_threads(n)


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("versediff: error[usage]: a subcommand is required", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    man = RunManifest(subcommand=args.command)
    start = time.perf_counter()
    io: dict = {}
    try:
        cfg, io = resolve(args)
        flat = {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.to_flat().items()}
        man.config = {**flat, **io}
        if args.print_config:
            sys.stdout.write(cfg.to_ini())
            return EXIT_OK
        _configure_threads()
        COMMANDS[args.command](cfg, io, man)
        code = EXIT_OK
    except CLIError as exc:
        man.error = f"{exc.category}: {exc}"
        print(f"versediff: error[{exc.category}]: {exc}", file=sys.stderr)
        code = exc.code
    except (ValueError, IndexError) as exc:
        man.error = f"data-error: {exc}"
        print(f"versediff: error[data-error]: {exc}", file=sys.stderr)
        code = EXIT_DATA
    man.exit_status = code
    man.wall_clock_seconds = time.perf_counter() - start
    if not io:
        io = {key: getattr(args, key) for _, key, _ in FLAGS[args.command]}
    path = _manifest_path(args, io)
    if path is not None:
        from .io import atomic_write_json

        try:
            atomic_write_json(path, man.to_dict())
        except OSError as exc:
            print(f"versediff: warning: could not write run manifest: {exc}", file=sys.stderr)
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
