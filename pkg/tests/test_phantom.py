"""Phantom generator: geometry, noise model, dataset files."""

import json
import math
from dataclasses import replace

import numpy as np
import pytest

from hetmt.errors import PhantomError
from hetmt.phantom import (CLASS_NAMES, OrganPrior, PhantomSpec,
                           boundary_distance, gen_dataset, gen_phantom_case,
                           gen_phantom_fields, load_case_bundle, load_manifest,
                           small_spec)


def _brute_distance(labels: np.ndarray) -> np.ndarray:
    """Reference distance-to-boundary: plain loops, no shared code."""
    h, w = labels.shape
    boundary = []
    for i in range(h):
        for j in range(w):
            v = labels[i, j]
            for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                ni, nj = i + di, j + dj
                if 0 <= ni < h and 0 <= nj < w and labels[ni, nj] != v:
                    boundary.append((i, j))
                    break
    if not boundary:
        return np.full(labels.shape, np.inf)
    out = np.empty(labels.shape)
    for i in range(h):
        for j in range(w):
            out[i, j] = min(math.hypot(i - bi, j - bj) for bi, bj in boundary)
    return out


class TestBoundaryDistance:
    def test_matches_brute_force_on_generated_case(self):
        fields = gen_phantom_fields(small_spec(), 3)
        ref = _brute_distance(fields["labels"])
        assert np.allclose(fields["distance"], ref, rtol=1e-12, atol=1e-9)

    def test_hand_made_block(self):
        labels = np.zeros((8, 8), dtype=np.int64)
        labels[3:5, 3:5] = 1
        d = boundary_distance(labels)
        # Both sides of the transition are boundary voxels at distance 0.
        for ij in ((3, 3), (4, 4), (2, 3), (5, 4), (3, 2), (4, 5)):
            assert d[ij] == 0.0
        assert d[0, 0] == pytest.approx(math.hypot(2, 3))
        assert np.allclose(d, _brute_distance(labels))

    def test_uniform_labels_infinite(self):
        d = boundary_distance(np.zeros((6, 6), dtype=np.int64))
        assert np.all(np.isinf(d))


class TestFields:
    def test_sigma_law(self):
        spec = small_spec()
        fields = gen_phantom_fields(spec, 1)
        expect = spec.sigma_lo + (spec.sigma_hi - spec.sigma_lo) * np.exp(
            -fields["distance"] / spec.boundary_decay)
        assert np.allclose(fields["sigma"], expect, rtol=1e-12)
        onb = fields["distance"] == 0.0
        assert onb.any()
        assert np.all(fields["sigma"][onb] == spec.sigma_hi)

    def test_sigma_reaches_floor_far_from_boundaries(self):
        spec = replace(PhantomSpec(), size=(128, 128), spacing=(1.0, 1.0))
        fields = gen_phantom_fields(spec, 0)
        assert fields["sigma"].min() <= spec.sigma_lo + 1e-3
        assert fields["sigma"].max() == spec.sigma_hi

    def test_sigma_monotone_in_distance(self):
        fields = gen_phantom_fields(small_spec(), 2)
        order = np.argsort(fields["distance"].ravel())
        s = fields["sigma"].ravel()[order]
        assert np.all(np.diff(s) <= 1e-12)

    def test_labels_valid_and_all_organs_present(self):
        spec = PhantomSpec()
        fields = gen_phantom_fields(spec, 0)
        labels = fields["labels"]
        assert labels.min() >= 0 and labels.max() < spec.num_classes
        assert set(np.unique(labels)) == set(range(6))

    def test_placement_robust_across_seeds(self):
        spec = PhantomSpec()
        for seed in range(30):
            labels = gen_phantom_fields(spec, seed)["labels"]
            assert set(np.unique(labels)) == set(range(6)), f"seed {seed}"

    def test_intensity_model_without_texture(self):
        spec = replace(small_spec(), texture_amplitude=0.0)
        fields = gen_phantom_fields(spec, 5)
        labels = fields["labels"]
        mr_expect = np.asarray(spec.mr_means)[labels]
        assert np.array_equal(fields["mr"], mr_expect)
        ct = fields["ct_clean"]
        base = np.asarray(spec.ct_means)[labels]
        rim = ct != base
        assert np.all(ct[rim] == spec.bone_rim_value)
        assert set(np.unique(labels[rim])) <= set(spec.bone_labels)
        assert rim.any()

    def test_bone_rim_invisible_in_mr(self):
        # MR depends only on labels + shared texture; CT additionally turns
        # the outer femur shell to rim value, so the regression target has
        # structure the input cannot resolve.
        spec = small_spec()
        fields = gen_phantom_fields(spec, 7)
        labels = fields["labels"]
        texture = fields["mr"] - np.asarray(spec.mr_means)[labels]
        ct_offset = fields["ct_clean"] - texture
        rim = (ct_offset == spec.bone_rim_value)
        assert rim.any()
        core = np.isin(labels, spec.bone_labels) & ~rim
        assert core.any()
        # Same MR law on rim and core voxels of the same class.
        for lbl in spec.bone_labels:
            on = labels == lbl
            mr_offset = fields["mr"][on] - texture[on]
            assert np.allclose(mr_offset, spec.mr_means[lbl], atol=1e-9)

    def test_ct_noise_is_standard_normal_when_scaled(self):
        zs = []
        for seed in range(4):
            fields = gen_phantom_fields(PhantomSpec(), seed)
            zs.append(((fields["ct"] - fields["ct_clean"]) / fields["sigma"]).ravel())
        z = np.concatenate(zs)
        assert abs(z.mean()) < 0.03
        assert abs(z.std() - 1.0) < 0.03

    def test_deterministic_in_seed(self):
        spec = small_spec()
        a = gen_phantom_fields(spec, 11)
        b = gen_phantom_fields(spec, 11)
        for key in a:
            assert np.array_equal(a[key], b[key]), key
        c = gen_phantom_fields(spec, 12)
        assert not np.array_equal(a["labels"], c["labels"]) or \
            not np.array_equal(a["ct"], c["ct"])

    def test_case_bundle_volumes(self):
        bundle = gen_phantom_case(small_spec(), 4, "caseX")
        assert bundle.case_id == "caseX"
        assert bundle.mr.kind == "intensity" and bundle.ct.kind == "intensity"
        assert bundle.labels.kind == "label"
        assert bundle.sigma_true.kind == "variance"
        assert bundle.mr.shape == (32, 32)


class TestSpecValidation:
    def test_organ_prior_must_fit_inside(self):
        bad = OrganPrior("blob", 1, ((0.9, 0.95), (0.4, 0.6)),
                         ((0.1, 0.2), (0.05, 0.1)))
        spec = replace(PhantomSpec(), organs=(bad,))
        with pytest.raises(PhantomError, match="blob"):
            spec.validate()

    def test_duplicate_labels_rejected(self):
        organ = PhantomSpec().organs[0]
        spec = replace(PhantomSpec(), organs=(organ, organ))
        with pytest.raises(PhantomError, match="duplicate"):
            spec.validate()

    def test_intensity_table_length(self):
        with pytest.raises(PhantomError, match="entries"):
            replace(PhantomSpec(), ct_means=(0.0, 1.0)).validate()

    def test_sigma_ordering(self):
        with pytest.raises(PhantomError, match="sigma"):
            replace(PhantomSpec(), sigma_hi=1.0, sigma_lo=5.0).validate()

    def test_class_names_cover_defaults(self):
        assert len(CLASS_NAMES) == PhantomSpec().num_classes


class TestDataset:
    def test_split_counts_and_naming(self, tmp_path):
        manifest = gen_dataset(small_spec(), 8, tmp_path, 0.75)
        entries = load_manifest(manifest)
        assert len(entries) == 8
        assert sum(e["split"] == "train" for e in entries) == 6
        assert sum(e["split"] == "test" for e in entries) == 2
        assert entries[0]["id"] == "case000"
        for e in entries:
            for channel in ("mr", "ct", "labels", "sigma_true"):
                assert e[channel].exists()

    def test_round_trip_matches_generator(self, tmp_path):
        spec = small_spec()
        manifest = gen_dataset(spec, 2, tmp_path, 0.5)
        entry = load_manifest(manifest)[1]
        bundle = load_case_bundle(entry, num_classes=spec.num_classes)
        direct = gen_phantom_case(spec, spec.seed + 1, "case001")
        assert bundle.mr == direct.mr
        assert bundle.ct == direct.ct
        assert bundle.labels == direct.labels
        assert bundle.sigma_true == direct.sigma_true

    def test_regeneration_is_byte_identical(self, tmp_path):
        spec = small_spec()
        m1 = gen_dataset(spec, 3, tmp_path / "a", 0.5)
        m2 = gen_dataset(spec, 3, tmp_path / "b", 0.5)
        assert m1.read_bytes() == m2.read_bytes()
        for f1 in sorted((tmp_path / "a").iterdir()):
            f2 = tmp_path / "b" / f1.name
            assert f1.read_bytes() == f2.read_bytes(), f1.name

    def test_manifest_is_sorted_json(self, tmp_path):
        manifest = gen_dataset(small_spec(), 1, tmp_path, 1.0)
        text = manifest.read_text()
        parsed = json.loads(text)
        assert text == json.dumps(parsed, sort_keys=True, indent=2) + "\n"

    def test_bad_arguments(self, tmp_path):
        with pytest.raises(PhantomError, match="n_cases"):
            gen_dataset(small_spec(), 0, tmp_path)
        with pytest.raises(PhantomError, match="fraction"):
            gen_dataset(small_spec(), 2, tmp_path, 1.5)
