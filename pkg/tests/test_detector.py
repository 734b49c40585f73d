import itertools
import json

import numpy as np
import pytest

from amibreak import data, detector, model
from amibreak.detector import (CalibrationError, Detector, DetectorConfig, ImportanceProfile,
                               ProfileMismatchError)

from conftest import profile_from_sets, random_net

IDENTITY = DetectorConfig(k_top=1, alpha=1.0, beta=1.0)


def brute_means(net, ds, layer, cls):
    rows = [model.forward(net, x).post_acts[layer] for x, y in zip(ds.inputs, ds.labels) if y == cls]
    return np.sum(rows, axis=0) / len(rows)


def test_k_equal_to_width_marks_every_neuron(blobs3_net, blobs3):
    prof = detector.extract_importance(blobs3_net, blobs3, 16)
    for layers in prof.indices:
        assert sorted(layers[0]) == list(range(16))
        assert sorted(layers[1]) == list(range(12))


def test_k_zero_gives_empty_sets(blobs3_net, blobs3):
    prof = detector.extract_importance(blobs3_net, blobs3, 0)
    assert all(idx == () for layers in prof.indices for idx in layers)


def test_single_class_top2_matches_brute_force():
    rng = np.random.default_rng(0)
    net = random_net(rng, [3, 4, 2])
    ds = data.Dataset(rng.uniform(size=(25, 3)), np.zeros(25, dtype=int), 2)
    # class 1 has no examples, so extraction must name it
    with pytest.raises(CalibrationError, match="class 1"):
        detector.extract_importance(net, ds, 2)
    one_class = data.Dataset(ds.inputs, ds.labels, 1)
    net1 = model.MlpNetwork([3, 4, 1], [net.weights[0], net.weights[1][:1]], [net.biases[0], net.biases[1][:1]])
    prof = detector.extract_importance(net1, one_class, 2)
    means = brute_means(net1, one_class, 0, 0)
    expected = sorted(range(4), key=lambda i: (-means[i], i))[:2]
    assert list(prof.indices[0][0]) == expected


def test_extraction_is_permutation_invariant(blobs3_net, blobs3):
    a = detector.extract_importance(blobs3_net, blobs3, 4)
    order = np.random.default_rng(1).permutation(len(blobs3))
    b = detector.extract_importance(blobs3_net, blobs3.subset(order), 4)
    assert a.indices == b.indices
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.means, b.means))


def test_profile_invariants():
    with pytest.raises(ProfileMismatchError):
        ImportanceProfile((((0, 0),),), 2, (4,))
    with pytest.raises(ProfileMismatchError):
        ImportanceProfile((((5,),),), 1, (4,))
    with pytest.raises(ProfileMismatchError):
        ImportanceProfile((((1,),),), 2, (4,))


def test_config_invariants():
    for bad in ({"alpha": 0.9}, {"beta": 0.0}, {"beta": 1.1}, {"k_top": -1}):
        with pytest.raises(ValueError):
            DetectorConfig(**bad)


def test_identity_augmentation_is_bitwise_forward():
    rng = np.random.default_rng(2)
    net = random_net(rng, [5, 9, 7, 4])
    ds = data.Dataset(rng.uniform(size=(40, 5)), rng.integers(0, 4, 40), 4)
    prof = detector.extract_importance(net, data.Dataset(ds.inputs, np.arange(40) % 4, 4), 3)
    for cfg in (DetectorConfig(3, 1.0, 1.0), DetectorConfig(0, 1.0, 1.0)):
        p = prof.with_k(cfg.k_top)
        for x in ds.inputs:
            logits, _ = detector.augmented_forward(net, p, cfg, x)
            assert logits.tobytes() == model.forward(net, x).logits.tobytes()


def test_hand_augmented_vectors(hand_net, hand_vectors):
    for case in hand_vectors["augmented"]:
        prof = profile_from_sets(case["important_by_class"], [2])
        cfg = DetectorConfig(1, case["alpha"], case["beta"])
        logits, label = detector.augmented_forward(hand_net, prof, cfg, case["x"])
        np.testing.assert_allclose(logits, case["logits"], atol=1e-12)
        assert label == case["label"]


def test_hand_flip_is_rejected(hand_net):
    prof = profile_from_sets([[1], [0]], [2])
    verdict = detector.detect(hand_net, prof, DetectorConfig(1, 3.0, 1.0), [2.0, 1.0])
    assert verdict == detector.Verdict("rejected", 0, 1)
    assert not verdict.accepted
    assert detector.detect(hand_net, prof, DetectorConfig(1, 1.2, 1.0), [2.0, 1.0]).accepted


def test_profile_architecture_mismatch(hand_net):
    prof = profile_from_sets([[0], [1]], [3])
    with pytest.raises(ProfileMismatchError):
        detector.augmented_forward(hand_net, prof, IDENTITY, [1.0, 1.0])
    with pytest.raises(ProfileMismatchError):
        Detector(hand_net, prof, IDENTITY)


def test_verdict_consistency_on_random_inputs(blobs3_net, blobs3):
    prof = detector.extract_importance(blobs3_net, blobs3, 2)
    det = Detector(blobs3_net, prof, DetectorConfig(2, 2.5, 0.6))
    rng = np.random.default_rng(3)
    statuses = set()
    for x in rng.uniform(size=(1000, 6)):
        v = det.detect(x)
        assert v.accepted == (v.original_label == v.augmented_label)
        assert v.original_label == model.predict(blobs3_net, x)[0]
        statuses.add(v.status)
    assert statuses <= {"accepted", "rejected"}


def test_identity_accepts_random_inputs(blobs3_net, blobs3):
    det = Detector(blobs3_net, detector.extract_importance(blobs3_net, blobs3, 4), DetectorConfig(4, 1.0, 1.0))
    rng = np.random.default_rng(4)
    assert all(det.detect(x).accepted for x in rng.uniform(size=(1000, 6)))


def test_zero_bias_uniform_scaling_keeps_argmax():
    rng = np.random.default_rng(5)
    for _ in range(20):
        w1, w2 = rng.normal(size=(6, 4)), rng.normal(size=(3, 6))
        net = model.MlpNetwork([4, 6, 3], [w1, w2], [np.zeros(6), np.zeros(3)])
        prof = profile_from_sets([list(range(6))] * 3, [6])
        for alpha in (1.0, 1.7, 3.0):
            cfg = DetectorConfig(6, alpha, 1.0)
            for x in rng.uniform(size=(20, 4)):
                logits, label = detector.augmented_forward(net, prof, cfg, x)
                base = model.forward(net, x).logits
                np.testing.assert_allclose(logits, alpha * base, rtol=1e-12, atol=1e-12)
                assert label == model.argmax(base)


def test_fpr_is_rejected_over_correct(blobs3_net, blobs3):
    prof = detector.extract_importance(blobs3_net, blobs3, 1)
    cfg = DetectorConfig(1, 3.0, 0.5)
    fpr = detector.measure_fpr(blobs3_net, prof, cfg, blobs3)
    clean = detector.correctly_classified(blobs3_net, blobs3)
    rejected = sum(not detector.detect(blobs3_net, prof, cfg, x).accepted for x in clean.inputs)
    assert fpr == rejected / len(clean)
    assert fpr == detector.measure_fpr(blobs3_net, prof, cfg, blobs3)


@pytest.fixture(scope="module")
def self_labelled():
    """Random net labelled by its own predictions: every input is correctly
    classified and the calibration table spans a wide FPR range."""
    rng = np.random.default_rng(4)
    net = random_net(rng, [6, 16, 12, 3], bias_scale=0.1)
    inputs = rng.normal(size=(90, 6)).clip(-3, 3) / 6 + 0.5
    labels = np.array([model.predict(net, x)[0] for x in inputs])
    ds = data.Dataset(inputs, labels, 3)
    return net, ds, detector.extract_importance(net, ds, 16)


def test_calibrate_target_zero_allows_identity(self_labelled):
    net, ds, prof = self_labelled
    table = detector.calibration_table(net, prof, ds)
    first_cfg, first_fpr = table[0]
    assert first_cfg.is_identity and first_fpr == 0.0
    assert max(f for _, f in table) > 0.5
    chosen = detector.calibrate(net, prof, ds, 0.0)
    assert dict(table)[chosen] <= 0.02


def test_calibration_grid_order_and_clipping():
    grid = list(detector.calibration_grid(widths=(6, 3)))
    assert len(grid) == 21 * 6 * 5
    assert grid[0] == DetectorConfig(1, 1.0, 1.0)
    assert grid[5] == DetectorConfig(1, 1.0, 0.9)
    assert grid[30] == DetectorConfig(1, 1.1, 1.0)
    assert max(c.k_top for c in grid) == 6
    assert detector.ALPHA_GRID[-1] == 3.0 and detector.BETA_GRID[-1] == 0.5


@pytest.mark.parametrize("target", [0.05, 0.1, 0.3])
def test_calibrate_matches_exhaustive_oracle(self_labelled, target):
    net, ds, prof = self_labelled
    tol = 0.02
    best_cfg, best_fpr = None, None
    # independent loop over the grid, scoring each point with measure_fpr
    for alpha, beta, k in itertools.product(detector.ALPHA_GRID, detector.BETA_GRID, detector.K_GRID):
        cfg = DetectorConfig(min(k, 16), alpha, beta)
        fpr = detector.measure_fpr(net, prof.with_k(cfg.k_top), cfg, ds)
        if target - tol <= fpr <= target + tol and (best_fpr is None or fpr > best_fpr):
            best_cfg, best_fpr = cfg, fpr
    assert best_cfg is not None
    assert detector.calibrate(net, prof, ds, target, tol) == best_cfg


def test_calibration_failure_carries_closest():
    table = [(DetectorConfig(1, 1.0, 1.0), 0.0), (DetectorConfig(1, 2.0, 1.0), 0.3)]
    with pytest.raises(CalibrationError) as info:
        detector.select_config(table, 0.099)
    assert info.value.closest_fpr == 0.0
    assert info.value.closest_config == table[0][0]


def test_select_config_first_hit_wins_ties():
    a, b, c = DetectorConfig(1, 1.5, 1.0), DetectorConfig(2, 1.5, 1.0), DetectorConfig(4, 1.5, 1.0)
    assert detector.select_config([(a, 0.09), (b, 0.11), (c, 0.11)], 0.099) == b


def test_calibrate_bad_target(blobs3_net, blobs3):
    prof = detector.extract_importance(blobs3_net, blobs3, 2)
    with pytest.raises(ValueError):
        detector.calibrate(blobs3_net, prof, blobs3, 1.0)


def test_profile_json_round_trip(blobs3_net, blobs3, tmp_path):
    prof = detector.extract_importance(blobs3_net, blobs3, 4)
    cfg = DetectorConfig(4, 2.3, 0.7)
    detector.save_profile(prof, cfg, tmp_path / "p.json")
    doc = json.loads((tmp_path / "p.json").read_text(encoding="utf-8"))
    assert set(doc) >= {"classes", "k_top", "alpha", "beta"}
    assert doc["classes"][0]["layers"][0]["layer"] == 0
    back, back_cfg = detector.load_profile(tmp_path / "p.json")
    assert back.indices == prof.indices and back_cfg == cfg
    assert back.with_k(2).indices == prof.with_k(2).indices


def test_minimal_json_without_means_loads(hand_net):
    doc = {"classes": [{"class": 0, "layers": [{"layer": 0, "indices": [1]}]},
                       {"class": 1, "layers": [{"layer": 0, "indices": [0]}]}],
           "k_top": 1, "alpha": 3.0, "beta": 1.0, "widths": [2]}
    prof, cfg = ImportanceProfile.from_json(doc)
    assert not Detector(hand_net, prof, cfg).detect([2.0, 1.0]).accepted
