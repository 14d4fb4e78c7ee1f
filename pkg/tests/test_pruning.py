import logging

import numpy as np
import pytest

from snpvit.data import synth_dataset
from snpvit.model import ConfigError, ModelConfig, build_model
from snpvit.pruning import (
    PruneMask,
    apply_and_retrain,
    artificial_mask,
    classifier_mask,
    interlayer_mask,
    random_mask,
    skip_field_ratio,
    threshold_for_dilution,
)
from snpvit.train import Hyper

TOY = ModelConfig(embed_dim=16, num_heads=2, ff_hidden=32, num_encoders=1, num_labels=5, image_shape=(3, 8, 8))


def test_classifier_mask_keeps_diagonal_outputs():
    m = classifier_mask([{2, 7}, set(), {0}], 10)
    assert m.keep.shape == (10, 3)
    assert np.flatnonzero(m.keep[:, 0]).tolist() == [2, 7]
    assert not m.keep[:, 1].any()
    assert classifier_mask([{2, 7}, set()], 10, keep_empty=True).keep[:, 1].all()


def test_classifier_mask_dilution():
    diags = [set(range(6))] * 6 + [set(range(5))] * 4
    assert classifier_mask(diags, 100).dilution == pytest.approx(0.944)


def test_interlayer_mask_examples():
    m = interlayer_mask([{1, 2}], [{2, 9}, {3, 9}])
    assert m.keep.tolist() == [[True], [False]]
    # one singleton label per node: links only within each label's node group
    labels = [0, 1, 0, 2, 1]
    m = interlayer_mask([{l} for l in labels], [{l} for l in labels[::-1]])
    want = np.array([[a == b for a in labels] for b in labels[::-1]])
    assert np.array_equal(m.keep, want)


def test_interlayer_exhaustive_soundness():
    rng = np.random.default_rng(0)
    din = [set(rng.choice(12, rng.integers(0, 4), replace=False).tolist()) for _ in range(30)]
    dout = [set(rng.choice(12, rng.integers(0, 4), replace=False).tolist()) for _ in range(20)]
    m = interlayer_mask(din, dout)
    for b in range(20):
        for a in range(30):
            assert m.keep[b, a] == bool(din[a] & dout[b])


def test_artificial_permutation():
    diags, m = artificial_mask(100, 100, 1, seed=0)
    assert sorted(next(iter(s)) for s in diags) == list(range(100))
    assert m.provenance == "A_ANDC"


def test_artificial_balance():
    diags, m = artificial_mask(256, 100, 5, seed=3)
    counts = np.bincount([l for s in diags for l in s], minlength=100)
    assert set(counts.tolist()) <= {12, 13}
    assert counts.sum() == 1280
    assert all(len(s) == 5 for s in diags)


def test_artificial_full_size_keeps_all():
    _, m = artificial_mask(10, 8, 8)
    assert m.dilution == 0


def test_artificial_warns_on_few_slots(caplog):
    with caplog.at_level(logging.WARNING):
        artificial_mask(3, 10, 2)
    assert "unassigned" in caplog.text


def test_random_mask_counts():
    assert random_mask((4, 5), 0.0).keep.all()
    assert not random_mask((4, 5), 1.0).keep.any()
    m = random_mask((256, 100), 0.944, seed=1)
    assert m.kept == 1434
    assert np.array_equal(m.keep, random_mask((256, 100), 0.944, seed=1).keep)


def test_mask_record():
    rec = random_mask((3, 4), 0.5, seed=2).record()
    assert rec["kept"] == 6 and rec["total"] == 12 and rec["provenance"] == "random"
    with pytest.raises(ValueError):
        PruneMask(np.ones((2, 2)), "magic")


def test_threshold_for_dilution():
    th, m = threshold_for_dilution(lambda t: random_mask((10, 10), t), 0.42)
    assert th == pytest.approx(0.45) and m.dilution >= 0.42


@pytest.fixture(scope="module")
def trained():
    ds = synth_dataset(5, 30, (3, 8, 8), margin=2.0, seed=0)
    m = build_model(TOY, seed=0)
    from snpvit.train import train

    train(m, ds, Hyper(lr=0.05, epochs=3, batch_size=25))
    return m, ds


def test_identity_mask_changes_nothing(trained):
    model, ds = trained
    m = model.copy()
    ev = ds["validation"]
    acc = m.accuracy(ev.images, ev.labels)
    keep = PruneMask(np.ones_like(m.params["head.fc_w"], bool), "random")
    before, after, report = apply_and_retrain(m, "head.fc_w", keep, Hyper(epochs=0), ds)
    assert before == after == acc and report is None


def test_masked_weights_stay_zero(trained):
    model, ds = trained
    m = model.copy()
    mask = random_mask(m.params["enc1.ff1.weight"].shape, 0.7, seed=0)
    apply_and_retrain(m, "enc1.ff1.weight", mask, Hyper(lr=0.05, epochs=2, batch_size=25), ds)
    assert not m.params["enc1.ff1.weight"][~mask.keep].any()


def test_background_rate_applies_to_other_layers(trained):
    model, ds = trained
    m = model.copy()
    mask = random_mask(m.params["head.fc_w"].shape, 0.5, seed=0)
    bg = Hyper(lr=1e-12, epochs=1, batch_size=25, l2=0.0)
    apply_and_retrain(m, "head.fc_w", mask, Hyper(lr=0.05, epochs=1, batch_size=25), ds, bg)
    assert np.abs(m.params["enc1.qkv.weight"] - model.params["enc1.qkv.weight"]).max() < 1e-8
    assert not np.array_equal(m.params["head.fc_w"][mask.keep], model.params["head.fc_w"][mask.keep])


def test_shape_mismatch(trained):
    model, ds = trained
    with pytest.raises(ConfigError):
        apply_and_retrain(model.copy(), "head.fc_w", random_mask((2, 2), 0.5), Hyper(epochs=0), ds)
    with pytest.raises(ConfigError):
        apply_and_retrain(model.copy(), "nope", random_mask((2, 2), 0.5), Hyper(epochs=0), ds)


def test_skip_ratio_degenerate(trained):
    model, ds = trained
    m = model.copy()
    m.params["enc1.proj.weight"][:] = 0
    m.params["enc1.proj.bias"][:] = 0
    with pytest.raises(ValueError, match="degenerate ratio"):
        skip_field_ratio(m, 1, ds["validation"].images)


def test_skip_ratio_reproducible_across_seeds(desk_runs):
    ratios = []
    for seed in (0, 1, 2):
        run = desk_runs(seed)
        ratios.append(skip_field_ratio(run.model, 1, run.dataset["validation"].images[:200]))
    ratios = np.array(ratios)
    assert np.isfinite(ratios).all() and (ratios > 0).all()
    assert ratios.max() / ratios.min() < 1.2
