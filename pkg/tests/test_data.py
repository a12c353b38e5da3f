"""Dataset parsing, synthetic generation, augmentation and PK sampling."""

import hashlib
from pathlib import Path

import numpy as np
import pytest

from stripereid.configs import SamplerConfig
from stripereid.data import (JUNK, DatasetMeta, ImageRecord, PKSampler,
                             augment_train, generate_synthetic, hflip,
                             load_image, load_market_layout, parse_market_name,
                             split_records)
from stripereid.errors import ConfigError, DataError


def dir_digest(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(path.name.encode())
            h.update(path.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# synthetic generator


def test_generator_is_deterministic_per_seed(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    generate_synthetic(a, 3, 4, image_size=(96, 32), seed=7)
    generate_synthetic(b, 3, 4, image_size=(96, 32), seed=7)
    assert dir_digest(a) == dir_digest(b)
    c = tmp_path / "c"
    generate_synthetic(c, 3, 4, image_size=(96, 32), seed=8)
    assert dir_digest(a) != dir_digest(c)


def test_generator_counts(tmp_path):
    counts = generate_synthetic(tmp_path / "d", 2, 2, image_size=(64, 32), seed=0)
    assert counts["train"] == 4
    train_files = list((tmp_path / "d" / "bounding_box_train").glob("*.jpg"))
    assert len(train_files) == 4
    ids = {parse_market_name(p.name)[0] for p in train_files}
    assert len(ids) == 2


def test_generator_rejects_single_identity(tmp_path):
    with pytest.raises(ConfigError):
        generate_synthetic(tmp_path / "x", 1, 4)


def test_loader_roundtrips_generator_counts_and_labels(synth_root, dataset):
    records, meta = dataset
    assert meta.counts["train"] == 8 * 16
    assert meta.num_identities == 8
    assert sorted(meta.identity_to_index.values()) == list(range(8))
    train = split_records(records, "train")
    assert len(train) == 128
    assert all(r.identity >= 0 for r in train)
    gallery = split_records(records, "gallery")
    junk = [r for r in gallery if r.identity == JUNK]
    assert len(junk) == 2
    assert len(gallery) == 8 * 4 + 2


def test_nearest_centroid_in_pixel_space_beats_chance(synth_root):
    records, meta = load_market_layout(synth_root)
    train = split_records(records, "train")
    by_id: dict[int, list[np.ndarray]] = {}
    for r in train:
        by_id.setdefault(r.identity, []).append(
            load_image(r.image_path, (96, 32)).astype(np.float64).ravel())
    centroids, held_out = {}, []
    for pid, imgs in by_id.items():
        centroids[pid] = np.mean(imgs[: len(imgs) // 2], axis=0)
        held_out.extend((pid, img) for img in imgs[len(imgs) // 2:])
    pids = sorted(centroids)
    correct = sum(
        1 for pid, img in held_out
        if pids[int(np.argmin([np.linalg.norm(img - centroids[c]) for c in pids]))] == pid
    )
    accuracy = correct / len(held_out)
    assert accuracy > 1.0 / len(pids)


# ---------------------------------------------------------------------------
# market layout parsing


def test_missing_subfolder_is_config_error(tmp_path):
    with pytest.raises(ConfigError):
        load_market_layout(tmp_path / "nonexistent")
    (tmp_path / "bounding_box_train").mkdir()
    with pytest.raises(ConfigError):
        load_market_layout(tmp_path)


def test_unparsable_filename_is_data_error_listing_the_file(tmp_path):
    for sub in ("bounding_box_train", "query", "bounding_box_test"):
        (tmp_path / sub).mkdir()
    bad = tmp_path / "bounding_box_train" / "not-a-market-name.jpg"
    bad.write_bytes(b"x")
    with pytest.raises(DataError, match="not-a-market-name"):
        load_market_layout(tmp_path)


def test_gallery_junk_ids_marked(tmp_path):
    for sub in ("bounding_box_train", "query", "bounding_box_test"):
        (tmp_path / sub).mkdir()
    (tmp_path / "bounding_box_train" / "0001_c1s1_000001_00.jpg").write_bytes(b"x")
    (tmp_path / "query" / "0001_c1s1_000002_00.jpg").write_bytes(b"x")
    (tmp_path / "bounding_box_test" / "0001_c2s1_000003_00.jpg").write_bytes(b"x")
    (tmp_path / "bounding_box_test" / "-1_c2s1_000004_00.jpg").write_bytes(b"x")
    (tmp_path / "bounding_box_test" / "0000_c2s1_000005_00.jpg").write_bytes(b"x")
    records, meta = load_market_layout(tmp_path)
    gallery = split_records(records, "gallery")
    assert sorted(r.identity for r in gallery) == [JUNK, JUNK, 1]
    assert meta.num_identities == 1


def test_parse_market_name():
    assert parse_market_name("0002_c1s1_000451_03.jpg") == (2, 1)
    assert parse_market_name("-1_c6s3_077419_05.jpg") == (-1, 6)
    with pytest.raises(DataError):
        parse_market_name("whatever.jpg")


# ---------------------------------------------------------------------------
# augmentation


def test_flip_is_an_involution(rng):
    x = rng.standard_normal((3, 16, 8)).astype(np.float32)
    assert np.array_equal(hflip(hflip(x)), x)


def test_flip_probability_zero_is_identity(rng):
    x = rng.standard_normal((3, 8, 4)).astype(np.float32)
    out = augment_train(x, rng, flip_prob=0.0)
    assert out is x


def test_flip_frequency_monte_carlo():
    gen = np.random.default_rng(123)
    x = np.zeros((3, 4, 2), dtype=np.float32)
    x[:, :, 0] = 1.0
    flips = sum(
        1 for _ in range(10_000)
        if augment_train(x, gen, flip_prob=0.5)[0, 0, 0] == 0.0
    )
    assert abs(flips / 10_000 - 0.5) <= 0.02


def test_resize_and_flip_preserve_tensor_shape(synth_root):
    records, _ = load_market_layout(synth_root)
    img = load_image(records[0].image_path, (384, 128))
    assert img.shape == (384, 128, 3)
    from stripereid.data import normalize_image
    x = normalize_image(img, (0.5, 0.5, 0.5), (0.25, 0.25, 0.25))
    assert x.shape == (3, 384, 128)
    assert hflip(x).shape == (3, 384, 128)


# ---------------------------------------------------------------------------
# PK sampler


def fabricate_records(images_per_id: dict[int, int]):
    records, ids = [], sorted(images_per_id)
    for pid in ids:
        for j in range(images_per_id[pid]):
            records.append(ImageRecord(f"mem://{pid}/{j}", pid, 1 + j % 2, "train"))
    meta = DatasetMeta(num_identities=len(ids),
                       identity_to_index={pid: i for i, pid in enumerate(ids)},
                       counts={"train": len(records)})
    return records, meta


def test_batch_is_p_distinct_k_each():
    records, meta = fabricate_records({pid: 6 for pid in range(20)})
    sampler = PKSampler(records, meta, SamplerConfig(p=16, k=4, seed=0))
    labels, idxs = sampler.next_batch_indices()
    assert len(labels) == 64 and len(idxs) == 64
    uniq, counts = np.unique(labels, return_counts=True)
    assert len(uniq) == 16 and (counts == 4).all()


def test_sampler_property_over_1000_batches_and_epoch_coverage():
    records, meta = fabricate_records({pid: 5 for pid in range(11)})
    cfg = SamplerConfig(p=4, k=3, seed=3)
    sampler = PKSampler(records, meta, cfg)
    per_epoch = sampler.batches_per_epoch
    assert per_epoch == 3  # ceil(11 / 4)
    seen: set[int] = set()
    for step in range(1000):
        labels, idxs = sampler.next_batch_indices()
        uniq, counts = np.unique(labels, return_counts=True)
        assert len(uniq) == cfg.p and (counts == cfg.k).all()
        assert all(records[i].split == "train" and records[i].identity >= 0
                   for i in idxs)
        seen.update(int(u) for u in uniq)
        if (step + 1) % per_epoch == 0:
            assert seen == set(range(11)), "epoch must visit every identity"
            seen = set()


def test_two_identity_dataset_both_present():
    records, meta = fabricate_records({1: 3, 2: 3})
    sampler = PKSampler(records, meta, SamplerConfig(p=2, k=2, seed=1))
    labels, _ = sampler.next_batch_indices()
    assert set(labels) == {0, 1}


def test_short_identity_sampled_with_replacement():
    records, meta = fabricate_records({1: 1, 2: 5})
    sampler = PKSampler(records, meta, SamplerConfig(p=2, k=4, seed=0))
    labels, idxs = sampler.next_batch_indices()
    short_label = meta.train_label(1)
    picks = idxs[labels == short_label]
    assert len(picks) == 4
    assert len(set(picks)) == 1  # the single image, repeated


def test_sampler_rejects_insufficient_identities():
    records, meta = fabricate_records({1: 4, 2: 4})
    with pytest.raises(ConfigError):
        PKSampler(records, meta, SamplerConfig(p=3, k=2, seed=0))


def test_sampler_config_validation():
    with pytest.raises(ConfigError):
        SamplerConfig(p=1, k=4)
    with pytest.raises(ConfigError):
        SamplerConfig(p=4, k=1)
