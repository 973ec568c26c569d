"""Command-line entry point: ``flowpredict <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import codebook as cbk
from . import data, metrics, model, multiframe, nn, synth
from .errors import DataError, FormatError, NumericError, ShapeError
from .viz import visualize_flow

log = logging.getLogger("flowpredict")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
GRADCHECK_LIMIT = 1e-3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


class _Formatter(argparse.ArgumentDefaultsHelpFormatter):
    """Append concrete defaults; flags without one describe it in their help."""

    def _get_help_string(self, action):
        text = action.help or ""
        if "default" in text or action.default in (None, argparse.SUPPRESS):
            return text
        return text + " (default: %(default)s)"


def _grid(text):
    try:
        parts = [int(p) for p in text.lower().replace("x", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 8x8, got {text!r}") from None
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2 or min(parts) < 1:
        raise argparse.ArgumentTypeError(f"grid must look like 8x8, got {text!r}")
    return tuple(parts)


def _topn(text):
    try:
        values = tuple(int(p) for p in text.split(",") if p.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"topn must be a comma list like 5,10, got {text!r}") from None
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("topn values must be >= 1")
    return values


def _out_path(path):
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------------------
# shared flag groups
# ---------------------------------------------------------------------------

def _add_model_flags(p, clusters=True):
    p.add_argument("--config", help="key = value config file; flags override it (default: none)")
    p.add_argument("--preset", choices=("paper", "tiny"),
                   help="architecture preset (default: paper, or the config file's preset)")
    p.add_argument("--grid", type=_grid, help="label grid MxN, e.g. 8x8 (default: from preset)")
    if clusters:
        p.add_argument("--clusters", type=int, help="flow codebook size C (default: from preset)")


def _add_run_flags(p):
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--jobs", type=int, default=1, help="worker threads; 1 is the deterministic reference")


def _config(args, **extra):
    overrides = dict(extra)
    if getattr(args, "grid", None):
        overrides["grid_m"], overrides["grid_n"] = args.grid
    if getattr(args, "clusters", None) is not None:
        overrides["clusters"] = args.clusters
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    try:
        return model.load_config(args.config, args.preset, **overrides)
    except FileNotFoundError:
        raise
    except (ValueError, TypeError) as exc:
        raise UsageError(str(exc)) from None


def _load_items(manifest):
    items, skipped = data.load_records(data.read_manifest(manifest))
    return items, skipped


def _require(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"{args.command} needs {', '.join(missing)}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    rng = np.random.default_rng(args.seed)
    frames = max(args.label_frames, args.steps * args.step_frames, 1)
    specs = [synth.cue_scene(rng, (args.canvas, args.canvas), frames, args.max_sprites, args.speed)
             for _ in range(args.count)]
    path = synth.write_dataset(args.out, specs, args.label_frames, args.steps, args.step_frames)
    extra = f" and {Path(args.out) / 'sequences.txt'}" if args.steps else ""
    print(f"wrote {args.count} scenes to {path}{extra}")


def cmd_codebook(args):
    cfg = _config(args)
    items, skipped = _load_items(args.manifest)
    samples = model.codebook_samples(items, cfg, args.max_samples, args.seed)
    cb = cbk.build_codebook(samples, cfg.clusters, args.seed)
    cbk.save_codebook(cb, _out_path(args.out))
    print(f"codebook of {cb.size} centers from {len(samples)} cell vectors "
          f"({len(items)} records, {skipped} skipped); zero cluster {cb.zero_index} -> {args.out}")


def cmd_frame_codebook(args):
    cfg = _config(args)
    grid = args.grid or cfg.grid
    items, skipped = multiframe.load_sequences(data.read_manifest(args.manifest), args.steps,
                                               cfg.input_size, grid)
    frames = np.concatenate([f for _, f in items])
    fcb = cbk.build_frame_codebook(frames, args.clusters, args.seed)
    cbk.save_frame_codebook(fcb, _out_path(args.out))
    print(f"frame codebook of {fcb.size} {grid[0]}x{grid[1]} frames from {len(frames)} frames "
          f"({skipped} records skipped) -> {args.out}")


def cmd_train(args):
    cfg = _config(args, max_iters=args.iters)
    cb = cbk.load_codebook(args.codebook)
    items, skipped = _load_items(args.manifest)
    start = None
    if args.checkpoint:
        start = model.FlowModel.load(args.checkpoint, cfg)

    def progress(it, loss, lr):
        log.info("iter %d loss %.4f lr %g", it, loss, lr)

    net, train_log = model.train(items, cb, cfg, cfg.sgd.seed, args.jobs, _out_path(args.out),
                                 start, progress)
    if args.log:
        train_log.write_csv(_out_path(args.log))
    last = train_log.rows[-1][1] if train_log.rows else float("nan")
    print(f"trained {net.params.iteration} iterations on {len(items)} records "
          f"({skipped} skipped); last loss {last:.4f} -> {args.out}")


def cmd_predict(args):
    cfg = _config(args)
    cb = cbk.load_codebook(args.codebook)
    net = model.FlowModel.load(args.checkpoint, cfg)
    pred = model.predict(args.image, net, cb)
    data.write_image(pred.image, _out_path(args.out))
    if args.flow_out:
        data.write_flo(pred.flow, _out_path(args.flow_out))
    mean = pred.flow.reshape(-1, 2).mean(axis=0)
    print(f"predicted {pred.flow.shape[0]}x{pred.flow.shape[1]} flow, mean ({mean[0]:.3f}, {mean[1]:.3f}) "
          f"-> {args.out}")


def _featurizer(args, cfg):
    if args.features == "pixels":
        return model.grayscale_thumbnail
    _require(args, "checkpoint")
    net = model.FlowModel.load(args.checkpoint, cfg)
    return lambda image: net.features(image)[0]


def cmd_eval(args):
    cfg = _config(args)
    cb = cbk.load_codebook(args.codebook)
    if cb.size != cfg.clusters:
        raise DataError(f"codebook has {cb.size} clusters, config expects {cfg.clusters}")
    items, skipped = _load_items(args.manifest)
    evals = metrics.prepare_eval_items(items, cb, cfg.input_size, cfg.grid)
    kind = args.predictor
    if kind == "model":
        _require(args, "checkpoint")
        predictor = metrics.model_predictor(model.FlowModel.load(args.checkpoint, cfg), cb)
    elif kind == "oracle":
        predictor = metrics.oracle_predictor(cb)
    elif kind == "uniform":
        predictor = metrics.uniform_predictor(cb)
    else:
        _require(args, "train_manifest")
        train_items, _ = _load_items(args.train_manifest)
        train_evals = metrics.prepare_eval_items(train_items, cb, cfg.input_size, cfg.grid)
        predictor = metrics.nn_predictor(train_evals, _featurizer(args, cfg), cb.size)
    report = metrics.evaluate(predictor, evals, cb.size, args.topn, args.jobs)
    report.failures += skipped
    text = report.to_csv()
    if args.out:
        _out_path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    top = f"Top-{args.topn[0]}"
    print(f"{kind}: EPE {report.value('EPE'):.4f}, {top}-NZ {report.value(top, 'NZ'):.4f} "
          f"over {len(evals)} images ({report.failures} failed)"
          + (f" -> {args.out}" if args.out else ""), file=sys.stderr if not args.out else sys.stdout)


def cmd_viz(args):
    flow = data.read_flo(args.flo)
    mag = args.max_magnitude
    data.write_image(visualize_flow(flow, mag), _out_path(args.out))
    print(f"visualized {flow.shape[0]}x{flow.shape[1]} flow -> {args.out}")


def cmd_train_multi(args):
    cfg = _config(args)
    net = model.FlowModel.load(args.checkpoint, cfg)
    fcb = cbk.load_frame_codebook(args.codebook)
    items, skipped = multiframe.load_sequences(data.read_manifest(args.manifest), args.steps,
                                               cfg.input_size, fcb.grid)
    spec = multiframe.MultiFrameSpec(args.steps, args.hidden, fcb.size, net.feature_width)
    try:
        sgd = nn.SgdConfig(base_lr=args.lr, stepsize=args.stepsize, batch=args.batch,
                           max_iters=args.iters, seed=args.seed, momentum=args.momentum)
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    def progress(it, loss, lr):
        log.info("iter %d loss %.4f lr %g", it, loss, lr)

    params, rows = multiframe.train_multiframe(items, net, fcb, spec, sgd, args.seed, progress)
    multiframe.save_multiframe(_out_path(args.out), params)
    print(f"trained {spec.steps}-step chain for {params.iteration} iterations on {len(items)} sequences "
          f"({skipped} skipped); last loss {rows[-1][1]:.4f} -> {args.out}")


def cmd_predict_multi(args):
    cfg = _config(args)
    net = model.FlowModel.load(args.checkpoint, cfg)
    fcb = cbk.load_frame_codebook(args.codebook)
    params = multiframe.load_multiframe(args.multi_checkpoint)
    pred = multiframe.predict_multiframe(data.read_image(args.image), net, params, fcb)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t, (frame, vis) in enumerate(zip(pred.frames, pred.images), 1):
        data.write_flo(frame, out / f"step_{t:02d}.flo")
        data.write_image(vis, out / f"step_{t:02d}.ppm")
    print(f"predicted {len(pred.frames)} frames, clusters {pred.labels} -> {out}")


def cmd_gradcheck(args):
    cfg = _config(args)
    err = model.gradient_check(cfg, args.seed, args.samples)
    ok = err < GRADCHECK_LIMIT
    print(f"max relative error {err:.3e} ({'ok' if ok else 'FAILED'}, limit {GRADCHECK_LIMIT:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="flowpredict", description="Predict coarse optical flow from a single image.",
                     formatter_class=_Formatter, allow_abbrev=False)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    def add(name, func, text):
        p = sub.add_parser(name, help=text, description=text, formatter_class=_Formatter,
                           allow_abbrev=False)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "render synthetic scenes whose appearance decides their motion")
    p.add_argument("--out", required=True, help="output directory (required, no default)")
    p.add_argument("--count", type=int, default=200, help="number of scenes")
    p.add_argument("--canvas", type=int, default=77, help="square canvas side in pixels")
    p.add_argument("--label-frames", type=int, default=5, help="flow frames averaged into each label")
    p.add_argument("--steps", type=int, default=0, help="future steps written to sequences.txt (0: none)")
    p.add_argument("--step-frames", type=int, default=5, help="flow frames averaged per future step")
    p.add_argument("--max-sprites", type=int, default=2, help="sprites per scene, at most")
    p.add_argument("--speed", type=float, default=3.0, help="sprite speed in pixels per frame")
    p.add_argument("--seed", type=int, default=0, help="random seed")

    p = add("codebook", cmd_codebook, "k-means flow codebook from training cell means")
    p.add_argument("--manifest", required=True, help="training manifest (required, no default)")
    p.add_argument("--out", required=True, help="codebook file to write (required, no default)")
    _add_model_flags(p)
    p.add_argument("--max-samples", type=int, default=model.MAX_CODEBOOK_SAMPLES,
                   help="subsample the cell vectors to at most this many")
    p.add_argument("--seed", type=int, default=0, help="random seed")

    p = add("frame-codebook", cmd_frame_codebook, "k-means codebook of coarse flow frames")
    p.add_argument("--manifest", required=True, help="sequence manifest (required, no default)")
    p.add_argument("--out", required=True, help="frame codebook file to write (required, no default)")
    _add_model_flags(p, clusters=False)
    p.add_argument("--clusters", type=int, default=cbk.DEFAULT_FRAME_CLUSTERS, help="frame clusters K")
    p.add_argument("--steps", type=int, default=6, help="frames per sequence record")
    p.add_argument("--seed", type=int, default=0, help="random seed")

    p = add("train", cmd_train, "train the single-frame network")
    p.add_argument("--manifest", required=True, help="training manifest (required, no default)")
    p.add_argument("--codebook", required=True, help="flow codebook file (required, no default)")
    p.add_argument("--out", required=True, help="checkpoint to write (required, no default)")
    p.add_argument("--checkpoint", help="checkpoint to resume from (default: fresh initialization)")
    p.add_argument("--log", help="CSV training log to write (default: none)")
    p.add_argument("--iters", type=int, help="total SGD iterations (default: from config)")
    _add_model_flags(p)
    _add_run_flags(p)

    p = add("predict", cmd_predict, "predict coarse flow for one image")
    p.add_argument("--image", required=True, help="PPM/PGM image (required, no default)")
    p.add_argument("--checkpoint", required=True, help="network checkpoint (required, no default)")
    p.add_argument("--codebook", required=True, help="flow codebook file (required, no default)")
    p.add_argument("--out", required=True, help="color-coded PPM to write (required, no default)")
    p.add_argument("--flow-out", help="also write the decoded coarse flow as .flo (default: none)")
    _add_model_flags(p)

    for name, text in (("eval", "score a predictor on a manifest"),
                       ("nn-eval", "score the nearest-neighbour baseline on a manifest")):
        p = add(name, cmd_eval, text)
        p.add_argument("--manifest", required=True, help="test manifest (required, no default)")
        p.add_argument("--codebook", required=True, help="flow codebook file (required, no default)")
        p.add_argument("--checkpoint", help="network checkpoint for the model predictor or model "
                                            "features (default: none)")
        p.add_argument("--train-manifest", help="training manifest searched by the nn predictor "
                                                "(default: none)")
        p.add_argument("--features", choices=("pixels", "model"), default="pixels",
                       help="nn descriptor: 32x32 grayscale thumbnail or network features")
        p.add_argument("--topn", type=_topn, default=(5, 10), help="comma list of N for Top-N rows")
        p.add_argument("--out", help="report CSV to write (default: standard output)")
        if name == "eval":
            p.add_argument("--predictor", choices=("model", "nn", "oracle", "uniform"), default="model",
                           help="what to score")
        else:
            p.set_defaults(predictor="nn")
        _add_model_flags(p)
        _add_run_flags(p)

    p = add("viz", cmd_viz, "color-code a .flo file")
    p.add_argument("--flo", required=True, help="flow file (required, no default)")
    p.add_argument("--out", required=True, help="PPM to write (required, no default)")
    p.add_argument("--max-magnitude", type=float,
                   help="magnitude mapped to full saturation (default: the field's largest)")

    p = add("train-multi", cmd_train_multi, "train the multi-step frame classifier")
    p.add_argument("--manifest", required=True, help="sequence manifest (required, no default)")
    p.add_argument("--checkpoint", required=True, help="frozen single-frame checkpoint (required, no default)")
    p.add_argument("--codebook", required=True, help="frame codebook file (required, no default)")
    p.add_argument("--out", required=True, help="multiframe checkpoint to write (required, no default)")
    p.add_argument("--steps", type=int, default=6, help="future steps T")
    p.add_argument("--hidden", type=int, default=2000, help="hidden width H per step")
    p.add_argument("--iters", type=int, default=10000, help="SGD iterations")
    p.add_argument("--lr", type=float, default=0.01, help="base learning rate")
    p.add_argument("--stepsize", type=int, default=100000, help="iterations between learning-rate drops")
    p.add_argument("--momentum", type=float, default=0.9, help="SGD momentum")
    p.add_argument("--batch", type=int, default=16, help="minibatch size")
    _add_model_flags(p, clusters=False)
    p.add_argument("--seed", type=int, default=0, help="random seed")

    p = add("predict-multi", cmd_predict_multi, "predict future coarse flow frames for one image")
    p.add_argument("--image", required=True, help="PPM/PGM image (required, no default)")
    p.add_argument("--checkpoint", required=True, help="single-frame checkpoint (required, no default)")
    p.add_argument("--multi-checkpoint", required=True, help="multiframe checkpoint (required, no default)")
    p.add_argument("--codebook", required=True, help="frame codebook file (required, no default)")
    p.add_argument("--out", required=True, help="output directory (required, no default)")
    _add_model_flags(p, clusters=False)

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of the full network")
    _add_model_flags(p)
    p.add_argument("--samples", type=int, default=128, help="parameters probed")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except UsageError as exc:
        print(f"flowpredict {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"flowpredict {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, DataError, FormatError, ShapeError, ValueError) as exc:
        print(f"flowpredict {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
