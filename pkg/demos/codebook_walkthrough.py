"""Walk through the flow codebook on synthetic scenes.

Renders a handful of scenes, pools their flow to an 8x8 grid, clusters the
cell vectors and shows what quantizing and decoding does to the field.
Scores the ground-truth and uniform predictors so the metric rows have a
reference point.

    python demos/codebook_walkthrough.py --scenes 40 --clusters 10
"""
import argparse

import numpy as np

from flowpredict import codebook as cbk
from flowpredict import data, metrics, model, synth


def render(n, seed):
    rng = np.random.default_rng(seed)
    items = []
    for _ in range(n):
        frames, flows = synth.synthesize_sequence(synth.cue_scene(rng))
        items.append((frames[0], data.average_flows(flows[:5])))
    return items


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--scenes", type=int, default=40, help="scenes to render (default: 40)")
    ap.add_argument("--clusters", type=int, default=10, help="codebook size (default: 10)")
    ap.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    args = ap.parse_args()

    cfg = model.preset_config("tiny", clusters=args.clusters)
    items = render(args.scenes, args.seed)
    samples = model.codebook_samples(items, cfg)
    cb = cbk.build_codebook(samples, cfg.clusters, seed=args.seed)
    print(f"{len(samples)} cell vectors -> {cb.size} centers, zero cluster {cb.zero_index}")
    for r, (u, v) in enumerate(cb.centers):
        count = int((cbk.quantize_vectors(samples, cb) == r).sum())
        print(f"  center {r:2d}: ({u:+6.2f}, {v:+6.2f})  {count:5d} cells")

    # one-hot decoding can only land on centers, so the error is the
    # distance from each cell mean to its nearest center
    evals = metrics.prepare_eval_items(items, cb, cfg.input_size, cfg.grid)
    err = [np.linalg.norm(cbk.soft_decode(cbk.one_hot(e.labels, cb.size), cb) - e.means, axis=-1).mean()
           for e in evals]
    print(f"mean quantization error {np.mean(err):.3f} px (worst image {np.max(err):.3f})")

    # the oracle hands back the pooled cell means themselves, so its EPE is
    # zero even though the labels above lose a little
    for name, predictor in (("oracle", metrics.oracle_predictor(cb)),
                            ("uniform", metrics.uniform_predictor(cb))):
        report = metrics.evaluate(predictor, evals, cb.size)
        print(f"\n{name} predictor")
        print(report.to_table())


if __name__ == "__main__":
    main()
