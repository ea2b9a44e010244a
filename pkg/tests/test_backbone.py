import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybridtune import tensor as T
from hybridtune.backbone import (
    VIT_B16,
    ViTConfig,
    ViTWeights,
    default_taps,
    init_backbone,
    map_to_tokens,
    text_encode,
    tokenize,
    tokens_to_map,
    vit_forward,
    vit_param_shapes,
)
from hybridtune.errors import ConfigurationError, DimensionError, InputError
from hybridtune.tensor import Tensor


@pytest.fixture(scope="module")
def toy():
    return init_backbone(ViTConfig(), seed=0)


@pytest.fixture(scope="module")
def images():
    return np.random.default_rng(0).random((2, 1, 224, 224), dtype=np.float32)


class TestConfig:
    def test_toy_geometry(self):
        cfg = ViTConfig()
        assert cfg.num_tokens == 196 and cfg.grid == 14

    def test_default_taps(self):
        assert default_taps(12) == [3, 6, 9]
        assert default_taps(4) == [1, 2, 3]

    def test_indivisible_image(self):
        with pytest.raises(ConfigurationError):
            ViTConfig(image_size=220)

    def test_taps_must_increase(self):
        with pytest.raises(ConfigurationError):
            ViTConfig(tap_indices=[2, 1])
        with pytest.raises(ConfigurationError):
            ViTConfig(depth=4, tap_indices=[1, 4])

    def test_header_roundtrip(self):
        cfg = ViTConfig(depth=3, width=32, heads=2, tap_indices=[0, 2])
        assert ViTConfig.from_header({k: str(v) for k, v in cfg.to_header().items()}) == cfg

    def test_b16_dims_shapes_without_allocation(self):
        shapes = vit_param_shapes(ViTConfig(in_channels=3, **VIT_B16))
        total = sum(int(np.prod(s)) for s in shapes.values())
        # ViT-B/16 without class token is a little over 85.6 M parameters
        assert 85_000_000 < total < 87_000_000


class TestWeights:
    def test_same_seed_same_checksum(self, toy):
        assert init_backbone(ViTConfig(), seed=0).checksum() == toy.checksum()

    def test_different_seed(self, toy):
        assert init_backbone(ViTConfig(), seed=1).checksum() != toy.checksum()

    def test_read_only(self, toy):
        with pytest.raises(ValueError):
            toy.arrays["pos_embed"][0, 0] = 1.0

    def test_trunc_normal_std(self, toy):
        w = toy.arrays["blocks.0.mlp.fc1.weight"]
        assert np.abs(w).max() <= 0.04 + 1e-7
        assert 0.015 < w.std() < 0.02

    def test_save_load(self, toy, tmp_path):
        path = tmp_path / "vit.bin"
        toy.save(path)
        assert ViTWeights.load(path).checksum() == toy.checksum()

    def test_shape_mismatch(self, toy):
        arrays = dict(toy.arrays)
        arrays["pos_embed"] = np.zeros((10, 64), dtype=np.float32)
        with pytest.raises(DimensionError):
            ViTWeights(toy.config, arrays)


class TestForward:
    def test_tap_shapes(self, toy, images):
        taps = vit_forward(images, toy)
        assert sorted(taps.taps) == [1, 2, 3]
        for t in taps.taps.values():
            assert t.shape == (2, 196, 64)
            assert np.isfinite(t.data).all()

    def test_deterministic(self, toy, images):
        a, b = vit_forward(images, toy), vit_forward(images, toy)
        for i in a.taps:
            np.testing.assert_array_equal(a[i].data, b[i].data)

    def test_zeros_and_ones_differ(self, toy):
        zeros = vit_forward(np.zeros((1, 1, 224, 224)), toy)
        ones = vit_forward(np.ones((1, 1, 224, 224)), toy)
        for i in zeros.taps:
            assert not np.array_equal(zeros[i].data, ones[i].data)

    def test_wrong_size(self, toy):
        with pytest.raises(DimensionError):
            vit_forward(np.zeros((1, 1, 112, 112)), toy)

    def test_tap_consistency_with_truncated_forward(self, toy, images):
        full = vit_forward(images, toy)
        for i in full.taps:
            np.testing.assert_array_equal(vit_forward(images, toy, depth=i + 1).final.data, full[i].data)

    def test_last_tap_is_final(self, toy, images):
        out = vit_forward(images, toy)
        np.testing.assert_array_equal(out[3].data, out.final.data)


class TestTokenMaps:
    def test_grid_and_index(self):
        tokens = np.arange(196 * 2, dtype=float).reshape(1, 196, 2)
        fmap = tokens_to_map(Tensor(tokens)).data
        assert fmap.shape == (1, 2, 14, 14)
        for t in (0, 13, 14, 100, 195):
            np.testing.assert_array_equal(fmap[0, :, t // 14, t % 14], tokens[0, t])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 6), st.integers(1, 5), st.integers(0, 2**31))
    def test_roundtrip(self, b, s, d, seed):
        tokens = np.random.default_rng(seed).normal(size=(b, s * s, d))
        np.testing.assert_array_equal(map_to_tokens(tokens_to_map(Tensor(tokens))).data, tokens)
        fmap = np.random.default_rng(seed).normal(size=(b, d, s, s))
        np.testing.assert_array_equal(tokens_to_map(map_to_tokens(Tensor(fmap))).data, fmap)

    def test_non_square(self):
        with pytest.raises(DimensionError):
            tokens_to_map(Tensor(np.zeros((1, 5, 2))))


class TestTextEncoder:
    def test_three_tokens(self):
        assert len(tokenize("benign lymph node")) == 3

    def test_tokenizer_lowercases_and_splits(self):
        assert tokenize("Benign, LYMPH-node!") == tokenize("benign lymph node")
        assert all(0 <= t < 1024 for t in tokenize("any words at all 123"))

    def test_deterministic_and_unit_norm(self):
        a = text_encode("a benign nodule")
        np.testing.assert_array_equal(a, text_encode("a benign nodule"))
        assert float(a @ a) == pytest.approx(1.0, abs=1e-6)

    def test_distinct_captions_differ(self):
        assert not np.allclose(text_encode("benign"), text_encode("malignant"))

    def test_empty_caption(self):
        with pytest.raises(InputError):
            text_encode("   ")

    def test_vocab_seed_changes_embedding(self):
        assert not np.allclose(text_encode("benign", vocab_seed=0), text_encode("benign", vocab_seed=1))


def test_frozen_weights_untouched_by_gradient(toy, images):
    before = toy.checksum()
    taps = vit_forward(images[:1], toy)
    T.backward(T.tsum(taps.final))
    assert toy.checksum() == before
