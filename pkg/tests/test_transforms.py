import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from robustnd import transforms as T
from robustnd.errors import ConfigError, InputError

LIGHT_KINDS = {"color-jitter", "horizontal-flip", "grayscale", "blur", "small-translate"}
HARD_KINDS = {"rotation", "elastic-deform", "grid-distortion", "channel-shuffle", "cut-shuffle"}

images = arrays(np.float32, (3, 12, 12), elements=st.floats(0, 1, width=32))
seeds = st.integers(0, 2**32 - 1)


def fresh(seed):
    return np.random.default_rng(seed)


def test_registries_disjoint_and_complete():
    assert set(T.LIGHT_REGISTRY) == LIGHT_KINDS
    assert set(T.HARD_REGISTRY) == HARD_KINDS
    assert not set(T.LIGHT_REGISTRY) & set(T.HARD_REGISTRY)


def test_sample_light_deterministic():
    assert T.sample_light(fresh(7)) == T.sample_light(fresh(7))
    assert T.sample_light(fresh(7)).family == T.LIGHT


def test_sample_light_kind_coverage():
    kinds = {T.sample_light(fresh(s)).kind for s in range(1000)}
    assert kinds <= LIGHT_KINDS
    assert len(kinds) >= 3


def test_sample_hard_pair_deterministic_and_coverage():
    assert T.sample_hard_pair(fresh(3)) == T.sample_hard_pair(fresh(3))
    first, second = set(), set()
    for s in range(1000):
        a, b = T.sample_hard_pair(fresh(s))
        assert a.family == b.family == T.HARD
        first.add(a.kind)
        second.add(b.kind)
    assert first <= HARD_KINDS and second <= HARD_KINDS
    assert len(first) >= 2 and len(second) >= 2


def test_rotation_angles_at_least_90():
    for s in range(200):
        spec = T.sample_hard(fresh(s), ["rotation"])
        assert spec.params["angle"] in (90, 180, 270)


def test_empty_registry_is_config_error():
    with pytest.raises(ConfigError):
        T.sample_light(fresh(0), [])
    with pytest.raises(ConfigError):
        T.sample_hard_pair(fresh(0), [])


def test_unknown_kind_rejected():
    with pytest.raises(ConfigError):
        T.TransformSpec("sepia", {}, T.LIGHT)
    with pytest.raises(ConfigError):
        T.TransformSpec("rotation", {"angle": 45}, T.HARD)
    with pytest.raises(ConfigError):
        T.check_kinds(light=["rotation"])


def test_hflip_twice_is_identity(rng):
    img = rng.random((3, 16, 16)).astype(np.float32)
    flip = T.TransformSpec("horizontal-flip", {}, T.LIGHT)
    assert np.array_equal(T.apply(flip, T.apply(flip, img)), img)


def test_grayscale_channels_equal(rng):
    img = rng.random((3, 16, 16)).astype(np.float32)
    out = T.apply(T.TransformSpec("grayscale", {}, T.LIGHT), img)
    assert np.array_equal(out[0], out[1]) and np.array_equal(out[1], out[2])


def test_rotation_90_on_2x2_matches_index_permutation():
    # Pixels a b / c d; a 90 degree counter-clockwise turn gives b d / a c.
    img = np.arange(12, dtype=np.float32).reshape(3, 2, 2) / 12
    out = T.apply(T.TransformSpec("rotation", {"angle": 90}, T.HARD), img, min_side=1)
    for ch in range(3):
        a, b, c, d = img[ch, 0, 0], img[ch, 0, 1], img[ch, 1, 0], img[ch, 1, 1]
        assert out[ch].tolist() == [[b, d], [a, c]]


def test_below_min_side_is_input_error(rng):
    with pytest.raises(InputError):
        T.apply(T.TransformSpec("grayscale", {}, T.LIGHT), rng.random((3, 4, 4)))
    with pytest.raises(InputError):
        T.apply(T.TransformSpec("grayscale", {}, T.LIGHT), rng.random((16, 16)))


def test_zero_jitter_is_identity(rng):
    img = rng.random((3, 16, 16)).astype(np.float32)
    spec = T.TransformSpec("color-jitter", {"brightness": 0.0, "contrast": 0.0, "saturation": 0.0}, T.LIGHT)
    np.testing.assert_allclose(T.apply(spec, img), img, atol=1e-6)


def test_blur_kernel_normalized():
    w = T.blur_weights([0.1, 0.5, 1.0])
    np.testing.assert_allclose(w.sum(axis=1), 1.0)
    assert w.shape == (3, 2 * T.BLUR_RADIUS + 1)


def test_translate_shift_exact():
    img = np.zeros((1, 10, 10), dtype=np.float32)
    img[0, 4, 4] = 1.0
    out = T.apply(T.TransformSpec("small-translate", {"dx": 0.1, "dy": -0.1}, T.LIGHT), img)
    assert out[0, 3, 5] == 1.0


def test_cut_shuffle_moves_quadrants():
    img = np.zeros((3, 8, 8), dtype=np.float32)
    img[:, :4, :4] = 1.0
    out = T.apply(T.TransformSpec("cut-shuffle", {"perm": (1, 0, 2, 3)}, T.HARD), img)
    assert out[:, :4, 4:].min() == 1.0 and out[:, :4, :4].max() == 0.0


def test_apply_batch_matches_apply(rng):
    imgs = rng.random((40, 3, 16, 16)).astype(np.float32)
    specs = [T.sample_light(fresh(s)) for s in range(20)] + [T.sample_hard(fresh(s)) for s in range(20)]
    batch = T.apply_batch(specs, imgs)
    for s, x, y in zip(specs, imgs, batch):
        assert np.array_equal(T.apply(s, x), y)


def test_inverse_warp_undoes_flip_and_translate(rng):
    m = rng.random((16, 16))
    flip = T.TransformSpec("horizontal-flip", {}, T.LIGHT)
    assert np.array_equal(T.inverse_warp_map(flip, m[:, ::-1]), m)
    shift = T.TransformSpec("small-translate", {"dx": 0.1, "dy": 0.0}, T.LIGHT)
    moved = T.apply(shift, np.repeat(m[None].astype(np.float32), 3, 0))[0]
    back = T.inverse_warp_map(shift, moved)
    np.testing.assert_allclose(back[:, 2:14], m[:, 2:14].astype(np.float32))


@given(images, seeds)
def test_light_preserves_shape_range_and_is_deterministic(img, seed):
    spec = T.sample_light(fresh(seed))
    a, b = T.apply(spec, img), T.apply(spec, img)
    assert a.shape == img.shape and a.dtype == np.float32
    assert a.min() >= 0 and a.max() <= 1
    assert np.array_equal(a, b)


@given(images, seeds)
def test_hard_changes_nonconstant_images(img, seed):
    img = img.copy()
    # Make the image clearly non-degenerate: distinct channels and no symmetry.
    img += np.linspace(0, 0.5, img.size, dtype=np.float32).reshape(img.shape)
    img = np.clip(img / img.max(), 0, 1)
    spec = T.sample_hard(fresh(seed))
    out = T.apply(spec, img)
    assert out.shape == img.shape
    assert (out != img).any()
