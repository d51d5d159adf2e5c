import numpy as np
import pytest

from pivl.config import DataConfig
from pivl import synthgen
from pivl.synthgen import (IGNORE_ID, DatasetError, RenderError, downsample_parsing,
                           generate_dataset, part_vocabulary, render_sample,
                           sample_identity_specs, separability_score)


@pytest.fixture(scope="module")
def data_cfg():
    return DataConfig()


@pytest.fixture(scope="module")
def one_spec(data_cfg):
    rng = np.random.default_rng(7)
    return sample_identity_specs(1, data_cfg, rng)[0]


def test_part_vocabulary_bijection():
    vocab = part_vocabulary(5)
    assert [p.id for p in vocab] == [0, 1, 2, 3, 4]
    assert vocab[0].name == "background"
    assert len({p.name for p in vocab}) == 5
    vocab20 = part_vocabulary(20)
    assert len(vocab20) == 20
    with pytest.raises(ValueError):
        part_vocabulary(21)


def test_render_determinism(one_spec, data_cfg):
    a = render_sample(one_spec, 42, 0, data_cfg)
    b = render_sample(one_spec, 42, 0, data_cfg)
    assert (a.image == b.image).all()
    assert (a.parsing == b.parsing).all()


def test_render_parsing_ids_in_range(one_spec, data_cfg):
    s = render_sample(one_spec, 3, 1, data_cfg)
    assert set(np.unique(s.parsing)) <= set(range(data_cfg.num_parts))


def test_render_seed_changes_image_not_identity(one_spec, data_cfg):
    a = render_sample(one_spec, 0, 0, data_cfg)
    b = render_sample(one_spec, 1, 0, data_cfg)
    assert not (a.image == b.image).all()
    assert a.identity == b.identity


def test_render_paint_matches_parsing(one_spec, data_cfg):
    # parsing exactness: part pixels carry that part's base color up to the
    # global brightness gain
    s = render_sample(one_spec, 11, 2, data_cfg)
    for pid in range(1, data_cfg.num_parts):
        mask = s.parsing == pid
        px = s.image[mask].astype(np.float64)
        base = one_spec.part_colors[pid - 1]
        # same gain for all pixels: per-channel ratio is constant
        ratios = px / np.maximum(base, 1e-9)
        assert np.allclose(ratios, ratios[0:1], atol=0.01)


def test_render_part_coverage_floor(one_spec, data_cfg):
    s = render_sample(one_spec, 5, 0, data_cfg)
    counts = np.bincount(s.parsing.ravel(), minlength=data_cfg.num_parts)
    floor = int(np.ceil(0.01 * data_cfg.height * data_cfg.width))
    assert (counts[1:] >= floor).all()


def test_render_zero_area_part_rejected(data_cfg):
    rng = np.random.default_rng(0)
    spec = sample_identity_specs(1, data_cfg, rng)[0]
    bad = synthgen.IdentitySpec(
        spec.identity,
        spec.part_colors,
        np.array([0.97, 0.01, 0.01, 0.01]),
        spec.width_fracs,
    )
    with pytest.raises((RenderError, ValueError)):
        render_sample(bad, 0, 0, data_cfg)


def test_identity_spec_color_separation(data_cfg):
    rng = np.random.default_rng(5)
    specs = sample_identity_specs(12, data_cfg, rng)
    for i in range(len(specs)):
        for j in range(i + 1, len(specs)):
            gap = np.abs(specs[i].part_colors - specs[j].part_colors).max()
            assert gap >= data_cfg.color_separation


def test_generate_dataset_counts_and_split_invariants(default_split, default_config):
    d = default_config.data
    assert len(default_split.train) == d.train_identities * d.instances_per_identity
    assert len(default_split.query) + len(default_split.gallery) == \
        d.test_identities * d.instances_per_identity
    train_ids = {s.identity for s in default_split.train}
    test_ids = {s.identity for s in default_split.query + default_split.gallery}
    assert not (train_ids & test_ids)
    # every query identity appears in gallery under a different camera
    for q in default_split.query:
        cams = {g.camera for g in default_split.gallery if g.identity == q.identity}
        assert cams - {q.camera}


def test_generate_dataset_deterministic(default_split, default_config):
    again = generate_dataset(default_config.data, seed=0)
    for a, b in zip(default_split.train + default_split.query + default_split.gallery,
                    again.train + again.query + again.gallery):
        assert a.identity == b.identity and a.camera == b.camera
        assert (a.image == b.image).all()


def test_generate_dataset_worker_independent(default_split, default_config):
    par = generate_dataset(default_config.data, seed=0, workers=4)
    for a, b in zip(default_split.train, par.train):
        assert (a.image == b.image).all()


def test_generate_dataset_single_camera_rejected():
    cfg = DataConfig(cameras=1)
    with pytest.raises(DatasetError):
        generate_dataset(cfg, seed=0)


def test_separability_invariant(default_split):
    assert separability_score(default_split) >= 0.99


# ---------------------------------------------------------------------------
# downsample_parsing
# ---------------------------------------------------------------------------

def test_downsample_uniform_block():
    parsing = np.full((8, 8), 2, dtype=np.uint8)
    assert (downsample_parsing(parsing, 4) == 2).all()


def test_downsample_tie_breaks_to_smaller_id():
    parsing = np.array([[1, 1], [3, 3]], dtype=np.uint8)
    assert downsample_parsing(parsing, 2)[0, 0] == 1


def test_downsample_matches_bruteforce_histogram(rng):
    for _ in range(100):
        parsing = rng.integers(0, 5, size=(8, 8)).astype(np.uint8)
        out = downsample_parsing(parsing, 4)
        for bi in range(2):
            for bj in range(2):
                block = parsing[bi * 4:(bi + 1) * 4, bj * 4:(bj + 1) * 4]
                counts = np.bincount(block.ravel(), minlength=5)
                assert out[bi, bj] == counts.argmax()


def test_downsample_ignore_handling():
    parsing = np.full((4, 4), IGNORE_ID, dtype=np.uint8)
    assert (downsample_parsing(parsing, 2) == IGNORE_ID).all()
    # partially erased blocks vote over the remaining pixels
    parsing[0, 0] = 3
    out = downsample_parsing(parsing, 2)
    assert out[0, 0] == 3
    assert out[1, 1] == IGNORE_ID


def test_downsample_bad_stride():
    with pytest.raises(ValueError):
        downsample_parsing(np.zeros((6, 4), dtype=np.uint8), 4)


# ---------------------------------------------------------------------------
# disk round-trip
# ---------------------------------------------------------------------------

def test_save_load_roundtrip(tmp_path, default_split):
    root = str(tmp_path / "ds")
    synthgen.save_dataset(default_split, root)
    loaded = synthgen.load_dataset(root)
    assert loaded.part_names == default_split.part_names
    for split_name in ("train", "query", "gallery"):
        orig = getattr(default_split, split_name)
        back = getattr(loaded, split_name)
        assert len(orig) == len(back)
        for a, b in zip(orig, back):
            assert a.identity == b.identity and a.camera == b.camera
            assert (a.parsing == b.parsing).all()
            assert np.allclose(a.image, b.image, atol=1e-7)  # 8-bit grid is exact
