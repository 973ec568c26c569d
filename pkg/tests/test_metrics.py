import math

import numpy as np
import pytest

from flowpredict import codebook as cbk
from flowpredict import metrics as mt
from flowpredict import synth
from flowpredict.data import average_flows

import oracles


def _grid(rng, shape=(8, 8), scale=2.0):
    return rng.normal(scale=scale, size=shape + (2,))


# ---------------------------------------------------------------------------
# per-cell metrics
# ---------------------------------------------------------------------------

def test_epe_examples():
    a = np.random.default_rng(0).normal(size=(3, 3, 2))
    assert mt.epe(a, a) == 0.0
    assert mt.epe(np.array([[[3.0, 4.0]]]), np.zeros((1, 1, 2))) == 5.0
    assert math.isnan(mt.epe(a, a, np.zeros((3, 3), bool)))


def test_similarity_examples():
    x, y = np.array([[[1.0, 0.0]]]), np.array([[[0.0, 1.0]]])
    assert mt.direction_similarity(x, y) == 0.0
    assert mt.direction_similarity(x, -x) == -1.0
    assert mt.orientation_similarity(x, -x) == 1.0
    assert mt.orientation_similarity(x, y) == 0.0
    assert mt.orientation_similarity(np.array([[[1.0, 1.0]]]), x) == pytest.approx(math.sqrt(2) / 2, abs=1e-15)
    assert mt.direction_similarity(np.zeros((1, 1, 2)), x) == 0.0


def test_metrics_match_loop_oracles():
    rng = np.random.default_rng(1)
    for _ in range(10):
        p, g = _grid(rng), _grid(rng)
        g[rng.random((8, 8)) < 0.2] = 0.0
        mask = rng.random((8, 8)) < 0.6
        assert mt.epe(p, g, mask) == pytest.approx(oracles.epe_loop(p, g, mask), abs=1e-12)
        assert mt.direction_similarity(p, g, mask) == pytest.approx(oracles.dir_loop(p, g, mask), abs=1e-12)
        assert mt.orientation_similarity(p, g, mask) == pytest.approx(
            oracles.dir_loop(p, g, mask, absolute=True), abs=1e-12)


def test_top_n_examples():
    rng = np.random.default_rng(2)
    probs = rng.random((4, 4, 6))
    gt = probs.argmax(-1)
    assert mt.top_n_accuracy(probs, gt, 1) == 1.0
    other = rng.integers(0, 6, (4, 4))
    assert mt.top_n_accuracy(probs, other, 6) == 1.0
    assert mt.top_n_accuracy(probs, other, 60) == 1.0  # clamped to C


def test_top_n_ties_prefer_lower_index():
    probs = np.full((1, 1, 5), 0.2)
    assert mt.top_n_accuracy(probs, np.array([[1]]), 2) == 1.0
    assert mt.top_n_accuracy(probs, np.array([[2]]), 2) == 0.0


def test_top_n_matches_sort_oracle():
    rng = np.random.default_rng(3)
    for _ in range(10):
        probs = rng.random((8, 8, 10))
        probs[..., 3] = probs[..., 7]  # force ties
        gt = rng.integers(0, 10, (8, 8))
        mask = rng.random((8, 8)) < 0.7
        for n in (1, 5, 10):
            assert mt.top_n_accuracy(probs, gt, n, mask) == oracles.topn_loop(probs, gt, n, mask)


def test_metric_properties():
    rng = np.random.default_rng(4)
    p, g = _grid(rng), _grid(rng)
    assert mt.epe(p, g) == mt.epe(g, p) >= 0
    assert np.array_equal(np.abs(mt.cosine(p, g)), np.abs(mt.cosine(g, p)))
    probs = rng.random((8, 8, 12))
    gt = rng.integers(0, 12, (8, 8))
    acc = [mt.top_n_accuracy(probs, gt, n) for n in range(1, 13)]
    assert all(b >= a for a, b in zip(acc, acc[1:])) and acc[-1] == 1.0
    mask = rng.random((8, 8)) < 0.5
    assert mt.epe(p, g, mask) == pytest.approx(mt.epe(p[mask][None], g[mask][None]), abs=1e-15)
    p2 = p.copy()
    p2[~mask] = 1e6  # masked-out cells cannot leak
    assert mt.epe(p2, g, mask) == mt.epe(p, g, mask)


def test_mean_rank():
    probs = np.array([[[0.1, 0.6, 0.3], [0.5, 0.25, 0.25]]])
    assert mt.mean_rank(probs, np.array([[2, 2]])) == 2.5


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

def test_canny_constant_image_empty():
    assert not mt.canny_mask(np.full((16, 16, 3), 0.4), (4, 4)).any()


def test_canny_vertical_step_marks_straddling_cells():
    img = np.zeros((8, 8, 1))
    img[:, 3:] = 1.0  # boundary between columns 2 and 3, inside cell column 1
    expected = np.zeros((4, 4), bool)
    expected[:, 1] = True
    got = mt.canny_mask(img, (4, 4))
    assert np.array_equal(got, expected)
    assert np.array_equal(oracles.cell_any_loop(oracles.canny_loop(img[..., 0]), 4, 4), expected)


def test_canny_extreme_thresholds_empty():
    noise = np.random.default_rng(5).random((16, 16, 3))
    assert not mt.canny_mask(noise, (4, 4), low=1.0, high=1.0).any()


def test_canny_matches_loop_oracle():
    rng = np.random.default_rng(6)
    for _ in range(5):
        img = np.full((24, 24, 3), 0.5)
        for _ in range(3):
            y, x = rng.integers(0, 20, 2)
            img[y:y + rng.integers(3, 10), x:x + rng.integers(3, 10)] = rng.random()
        img += rng.uniform(-0.02, 0.02, img.shape)
        edges = oracles.canny_loop(oracles.gray_loop(img))
        assert np.array_equal(mt.canny_edges(img), edges)
        assert np.array_equal(mt.canny_mask(img, (8, 8)), oracles.cell_any_loop(edges, 8, 8))


def test_nonzero_mask_examples():
    cb = cbk.FlowCodebook([[1.0, 0.0], [0.0, 0.0], [0.0, 3.0]])
    assert not mt.nonzero_mask(np.ones((3, 3), int), cb).any()
    assert mt.nonzero_mask(np.array([[0, 2], [2, 0]]), cb).all()
    labels = np.random.default_rng(7).integers(0, 3, (8, 8))
    assert np.array_equal(mt.nonzero_mask(labels, cb), oracles.nonzero_loop(labels, 1))


# ---------------------------------------------------------------------------
# nearest neighbour
# ---------------------------------------------------------------------------

def test_neighbour_order_matches_sort_oracle():
    rng = np.random.default_rng(8)
    feats = rng.normal(size=(30, 16))
    q = rng.normal(size=16)
    dist = [sum((q[k] - f[k]) ** 2 for k in range(16)) for f in feats]
    assert mt.neighbour_order(q, feats).tolist() == sorted(range(30), key=lambda i: (dist[i], i))
    assert mt.neighbour_order(feats[11], feats)[0] == 11


def test_nn_baseline_dedups_in_match_order():
    feats = np.array([[0.0], [1.0], [2.0], [3.0]])
    labels = np.array([[[4]], [[4]], [[1]], [[2]]])
    out = mt.nn_baseline(np.array([0.0]), feats, labels, 4)
    assert out[0, 0].tolist() == [4, 1, 2, -1]
    assert mt.nn_baseline(np.array([2.9]), feats, labels, 2)[0, 0].tolist() == [2, 1]


def test_nn_baseline_full_set_includes_every_frame():
    rng = np.random.default_rng(9)
    feats = rng.normal(size=(6, 4))
    labels = rng.integers(0, 10, (6, 3, 3))
    out = mt.nn_baseline(rng.normal(size=4), feats, labels, 6)
    for i in range(3):
        for j in range(3):
            assert set(out[i, j][out[i, j] >= 0].tolist()) == set(labels[:, i, j].tolist())


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _synthetic_items(n, seed):
    rng = np.random.default_rng(seed)
    items = []
    for _ in range(n):
        imgs, flows = synth.synthesize_sequence(synth.cue_scene(rng))
        items.append((imgs[0], average_flows(flows[:5])))
    return items


@pytest.fixture(scope="module")
def small_eval():
    items = _synthetic_items(5, 10)
    cb = cbk.FlowCodebook([[0.0, 0.0], [3.0, 0.0], [-3.0, 0.0], [1.5, 0.0], [-1.5, 0.0], [0.5, 0.0]])
    return mt.prepare_eval_items(items, cb, (64, 64), (8, 8)), cb


def test_oracle_predictor_is_perfect(small_eval):
    evals, cb = small_eval
    rep = mt.evaluate(mt.oracle_predictor(cb), evals, cb.size, topn=(1, 5))
    for mk in mt.MASKS:
        assert rep.value("EPE", mk) == 0.0
        assert rep.value("Top-1", mk) == 1.0


def test_uniform_predictor_ranks_lowest_indices(small_eval):
    evals, cb = small_eval
    rep = mt.evaluate(mt.uniform_predictor(cb), evals, cb.size, topn=(2,))
    expect = np.mean([np.mean(e.labels < 2) for e in evals])
    assert rep.value("Top-2") == pytest.approx(expect, abs=1e-15)


def test_uniform_top5_is_5_over_c_on_balanced_labels():
    c = 40
    cb = cbk.FlowCodebook(np.stack([np.arange(c), np.zeros(c)], axis=1).astype(float))
    labels = np.arange(c).reshape(5, 8)
    item = mt.EvalItem(np.zeros((5, 8, 3)), labels, cb.centers[labels], {k: np.ones((5, 8), bool) for k in mt.MASKS})
    rep = mt.evaluate(mt.uniform_predictor(cb), [item], c)
    assert rep.value("Top-5") == 5 / c == 0.125


def test_report_matches_independent_recomputation(small_eval):
    evals, cb = small_eval
    rng = np.random.default_rng(11)
    probs = {id(e): rng.dirichlet(np.ones(cb.size), size=(8, 8)) for e in evals}

    def predictor(item):
        p = probs[id(item)]
        return mt.CellPrediction(cbk.soft_decode(p, cb), p)

    rep = mt.evaluate(predictor, evals, cb.size)
    for mk in mt.MASKS:
        epes, dirs, oris, t5 = [], [], [], []
        for e in evals:
            mask = e.masks[mk]
            if not mask.any():
                continue
            p = probs[id(e)]
            flow = np.array([[sum(p[i, j, r] * cb.centers[r] for r in range(cb.size)) for j in range(8)]
                             for i in range(8)])
            epes.append(oracles.epe_loop(flow, e.means, mask))
            dirs.append(oracles.dir_loop(flow, e.means, mask))
            oris.append(oracles.dir_loop(flow, e.means, mask, absolute=True))
            t5.append(oracles.topn_loop(p, e.labels, 5, mask))
        assert rep.value("EPE", mk) == pytest.approx(np.mean(epes), abs=1e-12)
        assert rep.value("Dir", mk) == pytest.approx(np.mean(dirs), abs=1e-12)
        assert rep.value("Orient", mk) == pytest.approx(np.mean(oris), abs=1e-12)
        assert rep.value("Top-5", mk) == np.mean(t5)


def test_evaluate_parallel_matches_serial(small_eval):
    evals, cb = small_eval
    feats = mt.nn_predictor(evals, lambda im: im.mean(axis=2).ravel(), cb.size)
    a = mt.evaluate(feats, evals, cb.size, jobs=1).to_csv()
    b = mt.evaluate(feats, evals, cb.size, jobs=3).to_csv()
    assert a == b


def test_nonzero_mask_ignores_prediction(small_eval):
    evals, cb = small_eval
    before = [e.masks["NZ"].copy() for e in evals]
    mt.evaluate(mt.uniform_predictor(cb), evals, cb.size)
    assert all(np.array_equal(b, e.masks["NZ"]) for b, e in zip(before, evals))


def test_failures_are_counted(small_eval):
    evals, cb = small_eval

    def flaky(item):
        if item is evals[0]:
            raise ValueError("boom")
        return mt.oracle_predictor(cb)(item)

    rep = mt.evaluate(flaky, evals, cb.size)
    assert rep.failures == 1 and rep.rows[("EPE", "All")][2] == len(evals) - 1


def test_report_csv_and_table(small_eval):
    evals, cb = small_eval
    rep = mt.evaluate(mt.oracle_predictor(cb), evals, cb.size)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "metric,mask,value,cells"
    assert lines[1].startswith("EPE,All,0.0,")
    assert len(lines) == 1 + 6 * 3
    table = rep.to_table()
    assert "EPE-Canny" in table and "Top-10-NZ" in table and "cell means" in table
