"""End-to-end smoke checks for the python module.

Each test touches one slice of the binding surface with a value the C++
suite already pins, so a failure here points at the glue, not the math.
"""

import math
import tempfile

import numpy as np
import pytest

import affmae


def test_round_b16_known_values():
    out = affmae.round_b16(np.array([1.0, 1.0 / 3.0, 0.0]))
    assert out[0] == 1.0
    assert out[1] == 0.333251953125  # nearest binary16 to 1/3
    assert out[2] == 0.0


def test_synth_image_range_and_determinism():
    a = affmae.synth_image(64, seed=7)
    b = affmae.synth_image(64, seed=7)
    assert a.shape == (64, 64)
    assert np.array_equal(a, b)
    assert a.min() >= 0.0 and a.max() <= 1.0
    assert not np.array_equal(a, affmae.synth_image(64, seed=8))


def test_mask_exact_count_and_shape():
    m = affmae.make_mask("perlin", 64, 0.5, seed=3)
    assert m.masked.shape == (64, 64)
    assert m.masked_count() == 2048
    r = affmae.make_mask("random", 64, 0.75, seed=3)
    assert r.masked_count() == 3072


def test_mask_bad_ratio_maps_to_value_error():
    with pytest.raises(ValueError):
        affmae.make_mask("perlin", 64, 1.5, seed=1)
    with pytest.raises(ValueError):
        affmae.make_mask("voronoi", 64, 0.5, seed=1)


def test_perlin_spectrum_redder_than_random():
    f = affmae.perlin_field(64, 64, seed=5)
    rng = np.random.default_rng(5)
    noise = rng.standard_normal((64, 64))
    assert affmae.psd_slope(f, 2.0, 8.0) > affmae.psd_slope(noise, 2.0, 8.0) + 1.0


def test_hilbert_order_is_a_permutation():
    idx = sorted(affmae.hilbert_index(4, x, y) for x in range(4) for y in range(4))
    assert idx == list(range(16))


def test_knn_finds_the_closest_key():
    keys = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]])
    idx, valid = affmae.knn(np.array([[9.0, 9.5]]), keys, 2)
    assert idx.shape == (1, 2)
    assert valid.all()
    assert idx[0, 0] == 3


def test_interp_weights_normalized_and_peaked():
    coords = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
    feats = np.array([[1.0], [2.0], [3.0]])
    out, w, failed = affmae.interp_softmax((0.1, 0.0), coords, feats, [0, 1, 2], p=4.0)
    assert not failed
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert w[0] > 0.99
    assert out[0] == pytest.approx(1.0, abs=0.02)


def test_retained_selection():
    assert affmae.retained_count(10, 0.4) == 4
    scores = np.array([[0.9], [0.1], [0.5], [0.7]])
    kept = affmae.select_retained(scores, 0.5)
    assert sorted(kept) == [0, 3]


def test_effective_rank_separates_structure():
    rng = np.random.default_rng(0)
    spread = rng.standard_normal((64, 16))
    collapsed = np.outer(rng.standard_normal(64), rng.standard_normal(16))
    hi = affmae.effective_rank(spread)
    lo = affmae.effective_rank(collapsed)
    assert 0.0 < lo < 0.2 < 0.8 < hi <= 1.0


def test_flop_scaling_exponents():
    # quadratic attention only dominates the dense count at larger inputs
    nbhd, dense = affmae.flop_scaling([448, 512, 768])
    assert nbhd < 1.3
    assert dense > 1.7


def test_model_train_and_checkpoint_roundtrip():
    img = affmae.synth_image(32, seed=11)
    model = affmae.Model(image=32, warmup=5, seed=2)
    assert model.n_params > 0

    summary = model.train(8, [img])
    assert math.isfinite(summary["first_loss"])
    assert math.isfinite(summary["last_loss"])

    mask = model.make_mask(99)
    loss = model.masked_mse(img, mask)
    assert math.isfinite(loss)

    ranks = model.stage_ranks(img, mask)
    assert len(ranks) == 2
    assert all(0.0 < r <= 1.0 for r in ranks)

    coords = model.stage_tokens(img, mask)
    assert len(coords) == 2
    assert coords[0].shape[1] == 2
    assert coords[1].shape[0] < coords[0].shape[0]  # merging shrinks the set

    with tempfile.TemporaryDirectory() as d:
        model.save(d)
        fresh = affmae.Model(image=32, warmup=5, seed=2)
        fresh.load(d)
        assert fresh.masked_mse(img, mask) == pytest.approx(loss, rel=1e-12)
