"""Command line: gen-data | select-shots | train | eval | render.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 means "data error" here
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _split_arg(s: str):
    name, _, count = s.partition("=")
    if not name or not count.isdigit():
        raise argparse.ArgumentTypeError(f"split must look like name=count, got {s!r}")
    return name, int(count)


def cmd_gen_data(a) -> int:
    from .synthgen import generate_dataset, manifest_hash, stock_spec

    spec = stock_spec(a.spec)
    if a.image_size:
        spec.image_size = a.image_size
    splits = dict(a.split) if a.split else None
    out = generate_dataset(spec, a.n, a.seed, a.out, splits)
    print(f"wrote {a.n} samples to {out} (manifest sha256 {manifest_hash(out)})")
    return EXIT_OK


def cmd_select_shots(a) -> int:
    from .evalkit import select_shots
    from .nets import get_feature_extractor
    from .synthgen import load_dataset

    data = load_dataset(a.dataset)
    idx = data.split(a.split)
    feats = get_feature_extractor(a.features)(data.images(idx))
    chosen = idx[select_shots(feats, a.k, a.method, a.seed)]
    text = "".join(f"{i}\n" for i in chosen)
    if a.out:
        Path(a.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_train(a) -> int:
    from .train import TrainConfig, train

    raw = json.loads(Path(a.config).read_text())
    raw.pop("_defaults", None)
    for item in a.set or []:
        k, _, v = item.partition("=")
        try:
            raw[k] = json.loads(v)
        except json.JSONDecodeError:
            raw[k] = v
    if a.out:
        raw["out"] = a.out
    cfg = TrainConfig.from_dict(raw)
    res = train(cfg, resume=a.resume, given=set(raw))
    sys.stdout.write(res["metrics"].to_json())
    return EXIT_OK


def _read_predictions(path) -> dict:
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines()):
        if not line.strip():
            continue
        r = json.loads(line)
        try:
            out[int(r["index"])] = np.asarray(r["points"], dtype=float)
        except (KeyError, TypeError, ValueError) as e:
            from .synthgen import DatasetError

            raise DatasetError(f"{path}: line {n + 1}: bad prediction record ({e})") from e
    return out


def cmd_eval(a) -> int:
    from .evalkit import evaluate
    from .synthgen import DatasetError, load_dataset
    from .train import evaluate_model, load_checkpoint

    if a.checkpoint:
        model, _, _, cfg = load_checkpoint(a.checkpoint)
        data = load_dataset(a.dataset or cfg.dataset)
        report = evaluate_model(model, data, a.split, cfg.eval_batch)
    else:
        data = load_dataset(a.dataset, images=False)
        idx = data.split(a.split)
        preds = _read_predictions(a.predictions)
        missing = [int(i) for i in idx if int(i) not in preds]
        if missing:
            raise DatasetError(f"{a.predictions}: no prediction for sample(s) {missing[:5]}")
        pred = np.stack([preds[int(i)] for i in idx])
        bbox = None if data.bbox is None else data.bbox[idx]
        report = evaluate(pred, data.points[idx], data.annotated[idx], data.norm_pair, bbox=bbox)
    text = report.to_json()
    if a.out:
        Path(a.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_render(a) -> int:
    from .synthgen import load_dataset
    from .train import load_checkpoint
    from .viz import render_annotations, render_preview

    if a.checkpoint:
        model, _, _, cfg = load_checkpoint(a.checkpoint)
        data = load_dataset(a.dataset or cfg.dataset)
        render_preview(model, data, [a.sample], a.out, cfg.use_uncertainty)
    else:
        data = load_dataset(a.dataset)
        points = None
        if a.predictions:
            points = _read_predictions(a.predictions).get(a.sample)
        render_annotations(data, a.sample, a.out, points)
    print(f"wrote {a.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fewkp", description="Few-shot keypoint detection with skeleton-aware self-supervision.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--spec", required=True, help="stock creature spec (biped-2d, quad-3d)")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--split", type=_split_arg, action="append", help="name=count, in index order (repeatable)")
    g.add_argument("--image-size", type=int, default=None)
    g.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("select-shots", help="choose the examples to annotate")
    s.add_argument("--dataset", required=True)
    s.add_argument("--k", type=int, required=True)
    s.add_argument("--method", choices=["kmeans", "random"], default="kmeans")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default="train")
    s.add_argument("--features", default="pyramid")
    s.add_argument("--out", help="index file (default: stdout)")
    s.set_defaults(fn=cmd_select_shots)

    t = sub.add_parser("train", help="train from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="run directory (overrides the config)")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    t.add_argument("--resume", action="store_true", help="continue from the run directory's last checkpoint")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="metrics for a checkpoint or a predictions file")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--predictions", help="JSON lines with index and points (annotations.txt works)")
    e.add_argument("--dataset")
    e.add_argument("--split", default="test")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    r = sub.add_parser("render", help="PNG of predicted or annotated keypoints")
    r.add_argument("--checkpoint")
    r.add_argument("--predictions")
    r.add_argument("--dataset")
    r.add_argument("--sample", type=int, required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(fn=cmd_render)
    return p


def main(argv=None) -> int:
    from .diffcore import ArchiveError, NonFiniteError
    from .skeleton import SkeletonError
    from .synthgen import DatasetError, GenerationError
    from .train import NumericFailure

    parser = build_parser()
    try:
        a = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if a.cmd == "eval" and a.predictions and not a.dataset:
        print("fewkp eval: --predictions needs --dataset", file=sys.stderr)
        return EXIT_USAGE
    if a.cmd == "render" and not a.checkpoint and not a.dataset:
        print("fewkp render: give --checkpoint or --dataset", file=sys.stderr)
        return EXIT_USAGE
    try:
        return a.fn(a)
    except (NumericFailure, NonFiniteError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DatasetError, SkeletonError, ArchiveError, GenerationError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, KeyError) as e:
        print(f"fewkp {a.cmd}: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
