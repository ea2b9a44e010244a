import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridtune.errors import ConfigurationError, IntegrityError
from hybridtune.phantom import (
    PRESETS,
    PhantomSpec,
    caption_for,
    gen_phantom,
    lesion_mask,
    make_dataset,
    mean_spectrum,
    random_spec,
    read_dataset,
    read_pgm,
    speckle,
    write_dataset,
    write_pgm,
)


def ellipse_perimeter(a, b):
    # Ramanujan's second approximation
    h = ((a - b) / (a + b)) ** 2
    return math.pi * (a + b) * (1 + 3 * h / (10 + math.sqrt(4 - 3 * h)))


class TestSpeckle:
    def test_strictly_positive(self):
        assert (speckle((224, 224), 0.7, seed=0) > 0).all()

    @pytest.mark.parametrize("sigma", [0.3, 0.7, 1.5])
    def test_mean_within_three_standard_errors(self, sigma):
        field = speckle((224, 224), sigma, seed=11)
        expected = sigma * math.sqrt(math.pi / 2)
        # Rayleigh variance is (2 - pi/2) sigma^2
        se = sigma * math.sqrt(2 - math.pi / 2) / 224
        assert abs(field.mean() - expected) < 3 * se

    def test_seed_deterministic(self):
        np.testing.assert_array_equal(speckle((16, 16), 1.0, 5), speckle((16, 16), 1.0, 5))
        assert not np.array_equal(speckle((16, 16), 1.0, 5), speckle((16, 16), 1.0, 6))

    @pytest.mark.parametrize("sigma", [0.0, -1.0])
    def test_bad_sigma(self, sigma):
        with pytest.raises(ConfigurationError):
            speckle((4, 4), sigma, 0)


class TestSpec:
    def test_ellipse_outside(self):
        with pytest.raises(ConfigurationError):
            PhantomSpec(center=(10.0, 112.0), semi_axes=(40.0, 20.0)).validate()

    def test_short_period(self):
        with pytest.raises(ConfigurationError):
            PhantomSpec(artifact_period=1.5).validate()

    def test_bad_axes(self):
        with pytest.raises(ConfigurationError):
            PhantomSpec(semi_axes=(0.0, 10.0)).validate()

    def test_gen_rejects_invalid(self):
        with pytest.raises(ConfigurationError):
            gen_phantom(PhantomSpec(center=(220.0, 220.0)), seed=0)

    def test_label_rule(self):
        assert not PhantomSpec(semi_axes=(40.0, 20.0)).malignant
        assert PhantomSpec(semi_axes=(24.0, 20.0)).malignant
        assert PhantomSpec(semi_axes=(40.0, 20.0), irregularity=3.5).malignant
        assert not PhantomSpec(semi_axes=(40.0, 20.0), irregularity=2.5).malignant


class TestGenerate:
    def test_image_and_mask_contract(self):
        s = gen_phantom(PhantomSpec(), seed=0)
        assert s.image.shape == (224, 224) and s.mask.shape == (224, 224)
        assert s.image.min() >= 0 and s.image.max() <= 1
        assert s.mask.dtype == bool and s.mask.any()

    def test_deterministic(self):
        a, b = gen_phantom(PhantomSpec(), 3), gen_phantom(PhantomSpec(), 3)
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)
        assert a.caption == b.caption

    def test_axis_ratio_two_is_benign(self):
        s = gen_phantom(PhantomSpec(semi_axes=(40.0, 20.0), irregularity=0.0), seed=1)
        assert s.label_name == "benign"

    @settings(max_examples=30, deadline=None)
    @given(st.floats(6, 60), st.floats(6, 60), st.floats(0, math.pi),
           st.floats(-0.5, 0.5), st.floats(-0.5, 0.5))
    def test_mask_area_within_rasterisation_bound(self, a, b, rot, dy, dx):
        spec = PhantomSpec(center=(112.0 + dy, 112.0 + dx), semi_axes=(a, b), rotation=rot)
        count = int(lesion_mask(spec).sum())
        assert abs(count - math.pi * a * b) <= ellipse_perimeter(a, b)

    def test_mask_matches_brute_force_point_test(self):
        spec = PhantomSpec(center=(100.3, 120.7), semi_axes=(30.0, 12.0), rotation=0.6)
        c, s = math.cos(0.6), math.sin(0.6)
        count = 0
        for r in range(224):
            for col in range(224):
                u = (col - 120.7) * c + (r - 100.3) * s
                v = -(col - 120.7) * s + (r - 100.3) * c
                count += (u / 30.0) ** 2 + (v / 12.0) ** 2 <= 1.0
        assert int(lesion_mask(spec).sum()) == count

    def test_artifact_peak_at_28_cycles(self):
        spec = PhantomSpec(artifact_period=8.0, artifact_amplitude=0.3)
        img = gen_phantom(spec, seed=4).image
        profile = np.abs(np.fft.rfft(img.mean(axis=1) - img.mean()))
        assert int(np.argmax(profile[1:])) + 1 == 224 // 8

    def test_shadow_darkens_below_lesion(self):
        base = dict(center=(80.0, 112.0), semi_axes=(30.0, 20.0), artifact_amplitude=0.0)
        lit = gen_phantom(PhantomSpec(shadow=False, **base), seed=2).image
        dark = gen_phantom(PhantomSpec(shadow=True, **base), seed=2).image
        assert dark[150:, 100:124].mean() < 0.7 * lit[150:, 100:124].mean()
        np.testing.assert_array_equal(dark[:80], lit[:80])


class TestCaptions:
    def test_contains_label(self):
        spec = PhantomSpec(semi_axes=(40.0, 20.0))
        assert "benign" in caption_for(spec)
        assert "malignant" in caption_for(PhantomSpec(semi_axes=(20.0, 20.0)))

    def test_identical_specs(self):
        assert caption_for(PhantomSpec(shadow=True)) == caption_for(PhantomSpec(shadow=True))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.sampled_from(["A", "B"]))
    def test_cleaning_rule(self, seed, domain):
        cap = caption_for(random_spec(np.random.default_rng(seed), domain))
        assert cap.strip() and len(cap) >= 20


class TestDomains:
    def test_presets_differ(self):
        assert PRESETS["A"]["artifact_period"] == 8.0 and PRESETS["B"]["artifact_period"] == 14.0
        assert PRESETS["B"]["shadow"]

    def test_mean_spectra_differ(self):
        a = mean_spectrum(make_dataset(6, "A", seed=0))
        b = mean_spectrum(make_dataset(6, "B", seed=0))
        center = 112
        # vertical-axis peaks sit at 224/8 = 28 and 224/14 = 16 cycles
        assert a[center + 28, center] > 2 * b[center + 28, center]
        assert b[center + 16, center] > 2 * a[center + 16, center]

    def test_both_labels_present(self):
        labels = {s.label for s in make_dataset(40, "A", seed=0)}
        assert labels == {0, 1}


class TestSerialization:
    def test_pgm_roundtrip(self, tmp_path):
        arr = np.random.default_rng(0).integers(0, 256, size=(7, 11), dtype=np.uint8)
        write_pgm(tmp_path / "x.pgm", arr)
        np.testing.assert_array_equal(read_pgm(tmp_path / "x.pgm"), arr)

    def test_pgm_with_comment(self, tmp_path):
        path = tmp_path / "c.pgm"
        path.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\xff")
        np.testing.assert_array_equal(read_pgm(path), [[1, 255]])

    def test_not_p5(self, tmp_path):
        path = tmp_path / "p2.pgm"
        path.write_bytes(b"P2\n1 1\n255\n0\n")
        with pytest.raises(IntegrityError):
            read_pgm(path)

    def test_dataset_roundtrip(self, tmp_path):
        samples = make_dataset(4, "B", seed=1)
        manifest = write_dataset(samples, tmp_path, splits=["train", "train", "val", "test"], seed=1)
        back_manifest, back = read_dataset(tmp_path)
        assert [r["split"] for r in back_manifest.records] == ["train", "train", "val", "test"]
        assert back_manifest.seed == 1 and back_manifest.generator_version == manifest.generator_version
        for s, r in zip(samples, back):
            np.testing.assert_array_equal(s.mask, r.mask)
            assert np.abs(s.image - r.image).max() <= 1 / 255
            assert (s.label, s.caption) == (r.label, r.caption)
        for rec in manifest.records:
            assert os.path.exists(tmp_path / rec["path"])
        assert (tmp_path / "generator.cfg").read_text().startswith("generator_version=")

    def test_deleted_file_names_path(self, tmp_path):
        write_dataset(make_dataset(2, "A", seed=0), tmp_path)
        os.remove(tmp_path / "masks" / "00001.pgm")
        with pytest.raises(IntegrityError, match="00001.pgm"):
            read_dataset(tmp_path)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(IntegrityError):
            read_dataset(tmp_path)
