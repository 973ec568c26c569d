"""Train the tiny network on scenes where brightness decides motion.

Bright sprites move right and dark ones move left, so a single frame is
enough to predict the flow. After training, the script compares the network
against the raw-pixel nearest-neighbour baseline and the uniform control,
and writes color-coded predictions for a few held-out scenes.

    python demos/train_on_cue.py --iters 3000 --out demo_out
"""
import argparse
import time
from pathlib import Path

import numpy as np

from flowpredict import codebook as cbk
from flowpredict import data, metrics, model, synth
from flowpredict.viz import visualize_flow


def render(n, rng):
    items = []
    for _ in range(n):
        frames, flows = synth.synthesize_sequence(synth.cue_scene(rng))
        items.append((frames[0], data.average_flows(flows[:5])))
    return items


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train", type=int, default=200, help="training scenes (default: 200)")
    ap.add_argument("--test", type=int, default=50, help="held-out scenes (default: 50)")
    ap.add_argument("--iters", type=int, default=3000, help="SGD iterations (default: 3000)")
    ap.add_argument("--out", default="demo_out", help="directory for pictures (default: demo_out)")
    ap.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")
    args = ap.parse_args()

    rng = np.random.default_rng(args.seed)
    train, test = render(args.train, rng), render(args.test, rng)
    # mirroring would turn a bright right-mover into a bright left-mover
    cfg = model.preset_config("tiny", max_iters=args.iters, momentum=0.9, flip=False, log_every=500)
    cb = cbk.build_codebook(model.codebook_samples(train, cfg), cfg.clusters, seed=args.seed)

    start = time.perf_counter()
    net, _ = model.train(train, cb, cfg, seed=args.seed,
                         progress=lambda it, loss, lr: print(f"iter {it:5d}  loss {loss:8.3f}  lr {lr:g}"))
    print(f"trained in {time.perf_counter() - start:.0f}s")

    train_eval = metrics.prepare_eval_items(train, cb, cfg.input_size, cfg.grid)
    test_eval = metrics.prepare_eval_items(test, cb, cfg.input_size, cfg.grid)
    predictors = {
        "network": metrics.model_predictor(net, cb),
        "nearest neighbour": metrics.nn_predictor(train_eval, model.grayscale_thumbnail, cb.size),
        "uniform": metrics.uniform_predictor(cb),
    }
    print(f"\n{'predictor':>18} {'EPE':>7} {'Orient-NZ':>10} {'Top-5-NZ':>9}")
    for name, predictor in predictors.items():
        r = metrics.evaluate(predictor, test_eval, cb.size)
        print(f"{name:>18} {r.value('EPE'):7.3f} {r.value('Orient', 'NZ'):10.3f} {r.value('Top-5', 'NZ'):9.3f}")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, (image, flow) in enumerate(test[:4]):
        crop, crop_flow = net.prepare(image, flow)
        pred = cbk.soft_decode(net.forward(crop), cb)
        truth = cbk.cell_means(crop_flow, cfg.grid)
        scale = max(np.abs(truth).max(), 1e-6)
        data.write_image(crop, out / f"scene{i}_image.ppm")
        data.write_image(visualize_flow(pred, scale), out / f"scene{i}_predicted.ppm")
        data.write_image(visualize_flow(truth, scale), out / f"scene{i}_truth.ppm")
    print(f"\npictures for 4 held-out scenes in {out}/")


if __name__ == "__main__":
    main()
