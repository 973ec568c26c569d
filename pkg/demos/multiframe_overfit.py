"""Fit the multi-step frame classifier to a few sequences.

The single-frame network is left at its random initialization and only
supplies features. Each future step is the average flow of a short run of
frames, pooled to a coarse grid and replaced by its nearest frame-codebook
entry. A chain of small classifiers then learns those labels step by step.

    python demos/multiframe_overfit.py --sequences 10 --steps 3
"""
import argparse
import math

import numpy as np

from flowpredict import codebook as cbk
from flowpredict import data, model, multiframe as mf, nn, synth


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sequences", type=int, default=10, help="training sequences (default: 10)")
    ap.add_argument("--steps", type=int, default=3, help="future steps T (default: 3)")
    ap.add_argument("--hidden", type=int, default=32, help="hidden width per step (default: 32)")
    ap.add_argument("--clusters", type=int, default=8, help="frame codebook size K (default: 8)")
    ap.add_argument("--iters", type=int, default=2000, help="SGD iterations (default: 2000)")
    ap.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    cfg = model.preset_config("tiny")
    items = []
    for _ in range(args.sequences):
        frames, flows = synth.synthesize_sequence(synth.cue_scene(rng, frames=5 * args.steps))
        steps = [data.average_flows(flows[5 * s:5 * s + 5]) for s in range(args.steps)]
        items.append((frames[0], mf.coarse_frames(frames[0].shape, steps, cfg.input_size, (4, 4))))

    fcb = cbk.build_frame_codebook(np.concatenate([f for _, f in items]), args.clusters, seed=args.seed)
    net = model.FlowModel(cfg, seed=args.seed)
    spec = mf.MultiFrameSpec(args.steps, args.hidden, fcb.size, net.feature_width)
    feats = mf.extract_features(net, [img for img, _ in items], spec)
    labels = np.stack([fcb.assign(f) for _, f in items])
    print("frame labels per sequence:")
    for row in labels:
        print("  ", row.tolist())

    sgd = nn.SgdConfig(base_lr=0.01, stepsize=100000, batch=len(items), max_iters=args.iters, momentum=0.9)
    params, rows = mf.train_chain(feats, labels, spec, sgd, seed=args.seed, log_every=250)
    print(f"\nstart loss {rows[0][1]:.4f} (T ln K = {args.steps * math.log(fcb.size):.4f})")
    for it, loss, _ in rows[1:]:
        print(f"iter {it:5d}  loss {loss:.4f}")
    acc = mf.top1_accuracy(feats, labels, params, spec)
    print("per-step top-1:", np.round(acc, 3).tolist())

    pred = mf.predict_multiframe(items[0][0], net, params, fcb)
    print("\nfirst sequence, predicted clusters", pred.labels, "true", labels[0].tolist())
    for t, frame in enumerate(pred.frames, 1):
        mean = frame.reshape(-1, 2).mean(axis=0)
        print(f"  step {t}: mean flow ({mean[0]:+.2f}, {mean[1]:+.2f})")


if __name__ == "__main__":
    main()
