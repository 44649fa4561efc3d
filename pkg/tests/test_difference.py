import math

import numpy as np
import pytest

from drnet.difference import (
    CHANGED,
    UNCERTAIN,
    UNCHANGED,
    DifferenceImage,
    fcm_preclassify,
    labels_from_truth,
    log_ratio,
    mean_ratio,
    select_samples,
)
from drnet.errors import ArgumentError, SelectionError, ShapeError
from drnet.tensor import Rng


class TestLogRatio:
    def test_identical_images_give_zeros(self):
        img = np.random.default_rng(0).random((8, 8)) * 100
        di = log_ratio(img, img)
        assert (di.values == 0).all()

    def test_single_pixel_value(self):
        # i1=0, i2=e-1 at one pixel: |ln e - ln 1| = 1 before normalisation
        i1 = np.zeros((4, 4))
        i2 = np.zeros((4, 4))
        i2[1, 2] = math.e - 1.0
        di = log_ratio(i1, i2)
        assert di.values[1, 2] == pytest.approx(1.0)
        assert di.values.sum() == pytest.approx(1.0)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        i1 = rng.random((6, 6)) * 50
        i2 = rng.random((6, 6)) * 50
        assert (log_ratio(i1, i2).values == log_ratio(i2, i1).values).all()

    def test_range(self):
        rng = np.random.default_rng(2)
        v = log_ratio(rng.random((16, 16)) * 9, rng.random((16, 16)) * 250).values
        assert v.min() >= 0.0 and v.max() <= 1.0

    def test_extent_mismatch(self):
        with pytest.raises(ShapeError):
            log_ratio(np.zeros((2, 2)), np.zeros((3, 2)))

    def test_negative_intensity_rejected(self):
        with pytest.raises(ArgumentError):
            log_ratio(np.full((2, 2), -1.0), np.zeros((2, 2)))


class TestMeanRatio:
    def test_identical_images_give_zeros(self):
        img = np.random.default_rng(3).random((8, 8)) * 100
        assert (mean_ratio(img, img).values == 0).all()

    def test_direct_formula(self):
        # constant windows with means 1 and 3: d = 1 - 1/3 = 2/3 pre-normalisation
        i1 = np.ones((6, 6))
        i2 = np.full((6, 6), 3.0)
        i2[0, 0] = 3.0000001  # break the constant so min-max keeps scale
        d = mean_ratio(i1, i2)
        inner = d.values[2:4, 2:4]
        assert inner == pytest.approx(np.full((2, 2), 1.0), rel=1e-5)
        # raw (pre-normalisation) value checked via the un-normalised identity
        mu1, mu2 = 1.0, 3.0
        assert 1 - min(mu1, mu2) / max(mu1, mu2) == pytest.approx(2 / 3)

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        i1 = rng.random((7, 5)) * 10
        i2 = rng.random((7, 5)) * 10
        assert (mean_ratio(i1, i2).values == mean_ratio(i2, i1).values).all()

    def test_zero_means_give_zero(self):
        i1 = np.zeros((5, 5))
        i2 = np.zeros((5, 5))
        i2[4, 4] = 5.0
        d = mean_ratio(i1, i2)
        assert d.values[0, 0] == 0.0

    def test_window_means_are_clipped(self):
        # corner window covers 4 pixels only; zero-padding would dilute it
        i1 = np.ones((5, 5))
        i2 = np.ones((5, 5))
        i2[0, 0] = 9.0
        d = mean_ratio(i1, i2)
        # corner: mu2 = (9+1+1+1)/4 = 3 -> d_raw = 2/3, the image maximum
        assert d.values[0, 0] == pytest.approx(1.0)
        # far corner window is all ones -> d_raw = 0
        assert d.values[4, 4] == 0.0


def _reference_fcm(x, centers, m=2.0, iters=200):
    """Plain-loop fuzzy c-means used as the oracle for the toy case."""
    c = len(centers)
    centers = list(centers)
    for _ in range(iters):
        u = np.zeros((len(x), c))
        for p, xp in enumerate(x):
            d = [abs(xp - v) for v in centers]
            if min(d) == 0:
                u[p, int(np.argmin(d))] = 1.0
                continue
            for k in range(c):
                u[p, k] = 1.0 / sum((d[k] / dj) ** (2.0 / (m - 1.0)) for dj in d)
        for k in range(c):
            um = u[:, k] ** m
            centers[k] = float((um * x).sum() / um.sum())
    return np.asarray(centers), u


class TestFcm:
    def test_separated_groups_get_extreme_labels(self):
        rng = np.random.default_rng(5)
        low = 0.05 + 0.01 * rng.standard_normal(40)
        high = 0.95 + 0.01 * rng.standard_normal(40)
        mid = np.array([0.45, 0.5, 0.55, 0.52])
        values = np.clip(np.concatenate([low, high, mid]), 0, 1).reshape(12, 7)
        field = fcm_preclassify(DifferenceImage(values, "test"), rng=Rng(1, 5))
        flat = field.labels.ravel()
        assert (flat[:40] == UNCHANGED).all()
        assert (flat[40:80] == CHANGED).all()

    def test_agrees_with_reference_iteration(self):
        rng = np.random.default_rng(6)
        x = np.concatenate([
            0.1 + 0.02 * rng.standard_normal(30),
            0.5 + 0.02 * rng.standard_normal(30),
            0.9 + 0.02 * rng.standard_normal(30),
        ])
        x = np.clip(x, 0, 1)
        field = fcm_preclassify(DifferenceImage(x.reshape(9, 10), "t"), rng=Rng(3, 5))
        ref_centers, ref_u = _reference_fcm(x, [x.min(), float(np.median(x)), x.max()])
        got = field.labels.ravel()
        want = np.array([UNCHANGED, UNCERTAIN, CHANGED])[ref_u.argmax(axis=1)]
        assert (got == want).mean() > 0.98  # boundary points may differ

    def test_membership_normalisation(self):
        rng = np.random.default_rng(7)
        values = rng.random((20, 20))
        field = fcm_preclassify(DifferenceImage(values, "t"), rng=Rng(4, 5))
        assert field.confidence.min() >= 1.0 / 3.0 - 1e-9
        assert field.confidence.max() <= 1.0 + 1e-9

    def test_constant_image_is_all_uncertain(self):
        field = fcm_preclassify(DifferenceImage(np.zeros((6, 6)), "t"), rng=Rng(5, 5))
        assert (field.labels == UNCERTAIN).all()

    def test_empty_image_rejected(self):
        with pytest.raises(ArgumentError):
            fcm_preclassify(DifferenceImage(np.zeros((0, 3)), "t"), rng=Rng(6, 5))

    def test_wrong_cluster_count_rejected(self):
        with pytest.raises(ArgumentError):
            fcm_preclassify(DifferenceImage(np.zeros((3, 3)), "t"), c=2, rng=Rng(7, 5))


class TestSelectSamples:
    def make_field(self, n=16):
        labels = np.full((n, n), UNCHANGED, dtype=np.int8)
        labels[:4] = CHANGED
        labels[n - 2 :] = UNCERTAIN
        conf = np.linspace(0, 1, n * n).reshape(n, n)
        from drnet.difference import LabelField

        return LabelField(labels, conf)

    def test_count_is_floor_of_fraction_times_total(self):
        field = self.make_field(16)
        coords, labels = select_samples(field, 0.06, Rng(1, 3), balance=False)
        assert len(labels) == int(0.06 * 256)

    def test_256_field_six_percent(self):
        from drnet.difference import LabelField

        labels = np.full((256, 256), UNCHANGED, dtype=np.int8)
        labels[:128] = CHANGED
        field = LabelField(labels, np.ones((256, 256)))
        coords, _ = select_samples(field, 0.06, Rng(2, 3), balance=False)
        assert len(coords) == 3932  # floor(0.06 * 65536)

    def test_never_uncertain_never_duplicate(self):
        field = self.make_field()
        coords, labels = select_samples(field, 0.5, Rng(3, 3), balance=False)
        assert (field.labels[coords[:, 0], coords[:, 1]] != UNCERTAIN).all()
        assert len({(r, c) for r, c in coords.tolist()}) == len(coords)

    def test_exhaustive_fraction_returns_all_eligible(self):
        field = self.make_field(8)
        eligible = int((field.labels != UNCERTAIN).sum())
        coords, _ = select_samples(field, 1.0, Rng(4, 3), balance=False)
        assert len(coords) == eligible

    def test_determinism(self):
        field = self.make_field()
        a, _ = select_samples(field, 0.1, Rng(5, 3), balance=True)
        b, _ = select_samples(field, 0.1, Rng(5, 3), balance=True)
        assert (a == b).all()

    def test_balance_splits_evenly(self):
        field = self.make_field()
        coords, labels = select_samples(field, 0.2, Rng(6, 3), balance=True)
        n = int(0.2 * 256)
        assert (labels == CHANGED).sum() == n // 2
        assert (labels == UNCHANGED).sum() == n - n // 2

    def test_balance_prefers_high_confidence(self):
        field = self.make_field()
        coords, labels = select_samples(field, 0.05, Rng(7, 3), balance=True)
        changed = coords[labels == CHANGED]
        chosen_conf = field.confidence[changed[:, 0], changed[:, 1]]
        all_changed = np.argwhere(field.labels == CHANGED)
        all_conf = np.sort(field.confidence[all_changed[:, 0], all_changed[:, 1]])
        top = all_conf[-len(chosen_conf) :]
        assert np.sort(chosen_conf).tolist() == top.tolist()

    def test_empty_class_error_names_class(self):
        from drnet.difference import LabelField

        labels = np.full((8, 8), UNCHANGED, dtype=np.int8)
        field = LabelField(labels, np.ones((8, 8)))
        with pytest.raises(SelectionError, match="changed"):
            select_samples(field, 0.1, Rng(8, 3), balance=True)

    def test_fraction_out_of_range(self):
        field = self.make_field()
        for bad in (0.0, -0.1, 1.5):
            with pytest.raises(ArgumentError):
                select_samples(field, bad, Rng(9, 3))


class TestLabelsFromTruth:
    def test_maps_mask_to_labels(self):
        truth = np.array([[0, 1], [1, 0]], dtype=np.uint8)
        field = labels_from_truth(truth)
        assert field.labels.tolist() == [[UNCHANGED, CHANGED], [CHANGED, UNCHANGED]]
        assert (field.confidence == 1.0).all()

    def test_rejects_non_binary(self):
        with pytest.raises(ArgumentError):
            labels_from_truth(np.array([[0, 2]]))
