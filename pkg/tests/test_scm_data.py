import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.linear_model import LogisticRegression

from robustnd import scm_data as D
from robustnd.errors import InputError, MissingArtifact


def test_exposure_counts_95_5_split():
    cfg = D.ScmConfig(train_id=3600, test_id=2, test_ood=2, aux_per_class=1, shifted_pool=200)
    data = D.generate_dataset(cfg)
    assert len(data.train) == 3600
    assert int((data.train.domains == 0).sum()) == 3420
    assert int((data.train.domains == 1).sum()) == 180
    assert (data.train.labels == D.ID).all()


def test_exposure_zero_has_no_shifted(tiny_scm):
    data = D.generate_dataset(dataclasses.replace(tiny_scm, exposure="100:0"))
    assert (data.train.domains == 0).all()


def test_mix_exposure_arithmetic():
    main, shifted = np.arange(1000), np.arange(1000, 1300)
    out = D.mix_exposure(main, shifted, "100:0", total=1000)
    assert set(out) <= set(main) and len(out) == 1000
    out = D.mix_exposure(main, shifted, "90:10", total=1000)
    assert np.isin(out, main).sum() == 900 and np.isin(out, shifted).sum() == 100
    a = D.mix_exposure(main, shifted, "80:20", seed=3, total=1000)
    b = D.mix_exposure(main, shifted, "80:20", seed=3, total=1000)
    c = D.mix_exposure(main, shifted, "80:20", seed=4, total=1000)
    assert np.isin(a, shifted).sum() == 200
    assert set(a[np.isin(a, shifted)]) == set(b[np.isin(b, shifted)])
    assert set(a[np.isin(a, shifted)]) != set(c[np.isin(c, shifted)])


def test_insufficient_pool():
    with pytest.raises(InputError):
        D.mix_exposure(np.arange(10), np.arange(10, 11), "80:20", total=10)
    with pytest.raises(InputError):
        D.generate_dataset(D.ScmConfig(train_id=100, shifted_pool=5, exposure="80:20"))
    with pytest.raises(InputError):
        D.mix_exposure(np.arange(10), np.arange(3), "50:50")


def test_config_validation():
    with pytest.raises(InputError):
        D.ScmConfig(confounder_strength=1.5)
    with pytest.raises(InputError):
        D.ScmConfig(train_id=0)
    with pytest.raises(InputError):
        D.ScmConfig(main_hue=(0.4, 0.6), shifted_hue=(0.5, 0.8))


def test_splits_structure(tiny_data, tiny_scm):
    assert tiny_data.train.images.shape == (tiny_scm.train_id, 3, 32, 32)
    for split, dom in ((tiny_data.test_main, 0), (tiny_data.test_shifted, 1)):
        assert (split.domains == dom).all()
        assert int((split.labels == D.ID).sum()) == tiny_scm.test_id
        assert int((split.labels == D.OOD).sum()) == tiny_scm.test_ood
    assert set(tiny_data.aux_pretrain.labels.tolist()) == {0, 1, 2, 3}
    for split in (tiny_data.train, tiny_data.test_main, tiny_data.test_shifted):
        for s in split.latents:
            assert (s.label == D.OOD) == (s.core["shape"] == D.OOD_SHAPE)
    assert not set(D.AUX_SHAPES) & {D.ID_SHAPE, D.OOD_SHAPE}


def test_deterministic(tiny_scm, tiny_data):
    again = D.generate_dataset(tiny_scm)
    assert np.array_equal(again.train.images, tiny_data.train.images)
    assert again.train.seeds == tiny_data.train.seeds


def test_style_swap_keeps_label(tiny_data, tiny_scm):
    rng = np.random.default_rng(0)
    for s in tiny_data.train.latents[:10]:
        _, style, _, _ = D.sample_latents(rng, 0.9, D.SHIFTED)
        swapped = D.swap_style(s, style, D.SHIFTED, tiny_scm)
        assert swapped.label == s.label and swapped.core == s.core
        assert not np.array_equal(swapped.image, D.render(s.core, s.style, s.domain, tiny_scm))


def test_style_swap_only_changes_background(tiny_scm):
    rng = np.random.default_rng(1)
    core, style, _, _ = D.sample_latents(rng, 0.9, D.MAIN)
    _, style2, _, _ = D.sample_latents(rng, 0.9, D.MAIN)
    cov = D.shape_coverage(core, tiny_scm.size)
    a = D.render(core, style, D.MAIN, tiny_scm)
    b = D.render(core, style2, D.MAIN, tiny_scm)
    inside = cov > 0.999
    np.testing.assert_allclose(a[:, inside], b[:, inside], atol=2 / 255)
    assert np.abs(a[:, cov < 1e-3] - b[:, cov < 1e-3]).mean() > 0.01


@pytest.mark.parametrize("strength,lo,hi", [(1.0, 0.9, 1.0), (0.0, 0.45, 0.55)])
def test_confounder_probe(strength, lo, hi):
    x, y = D.raw_style_probe_data(strength, 4000, seed=0)
    xt, yt = D.raw_style_probe_data(strength, 4000, seed=1)
    acc = LogisticRegression().fit(x, y).score(xt, yt)
    assert lo <= acc <= hi


def test_noise_ood():
    a = D.noise_ood(10_000, (3, 2, 2), seed=0)
    assert np.array_equal(a, D.noise_ood(10_000, (3, 2, 2), seed=0))
    assert a.min() >= 0 and a.max() <= 1
    assert np.abs(a.mean(axis=0) - 0.5).max() < 0.02


def test_disk_roundtrip(tiny_data, tmp_path):
    D.write_dataset(tiny_data, tmp_path)
    back = D.read_dataset(tmp_path)
    for (name, a), (_, b) in zip(tiny_data.items(), back.items()):
        assert np.array_equal(a.images, b.images), name
        assert np.array_equal(a.labels, b.labels) and np.array_equal(a.domains, b.domains)
        assert list(a.seeds) == list(b.seeds)
    header = (tmp_path / "manifest.tsv").read_text().splitlines()[0]
    assert header.split("\t") == ["path", "split", "label", "domain", "seed"]
    assert (tmp_path / "scm_config.txt").exists()
    with pytest.raises(MissingArtifact):
        D.read_dataset(tmp_path / "missing")


@given(st.floats(0, 1), st.integers(0, 10**6))
def test_label_depends_on_core_only(strength, seed):
    core, style, u, label = D.sample_latents(np.random.default_rng(seed), strength, D.MAIN)
    assert label == (D.OOD if core["shape"] == D.OOD_SHAPE else D.ID)
