"""Synthetic dataset: rendering, PNM I/O, manifests, episodes, augmentation."""

import filecmp
from pathlib import Path

import numpy as np
import pytest

from simprop.data import (
    SHAPE_NAMES,
    DatasetManifest,
    Episode,
    EpisodeSampler,
    ImageSample,
    ManifestRecord,
    SyntheticConfig,
    generate_dataset,
    ica_augment,
    read_manifest,
    read_pgm,
    read_ppm,
    render_sample,
    switch_prob_schedule,
    write_manifest,
    write_pgm,
    write_ppm,
)
from conftest import tiny_synth_config

F32 = np.float32


class TestRendering:
    def test_deterministic_bitwise(self):
        cfg = tiny_synth_config()
        a = render_sample(cfg, 1, 5, seed=42)
        b = render_sample(cfg, 1, 5, seed=42)
        assert np.array_equal(a.image, b.image)
        assert np.array_equal(a.mask, b.mask)

    def test_different_ids_differ(self):
        cfg = tiny_synth_config()
        a = render_sample(cfg, 0, 0, seed=42)
        b = render_sample(cfg, 0, 1, seed=42)
        assert not np.array_equal(a.image, b.image)

    def test_different_seeds_differ(self):
        cfg = tiny_synth_config()
        a = render_sample(cfg, 0, 0, seed=1)
        b = render_sample(cfg, 0, 0, seed=2)
        assert not np.array_equal(a.image, b.image)

    def test_value_ranges(self):
        cfg = tiny_synth_config()
        s = render_sample(cfg, 2, 3, seed=0)
        assert s.image.dtype == F32
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert s.mask.dtype == np.uint8
        assert set(np.unique(s.mask)) == {0, 1}

    def test_fg_fraction_within_bounds(self):
        cfg = SyntheticConfig(
            image_size=32, n_classes=5, samples_per_class=4,
            train_classes=(0, 1, 2), test_classes=(3, 4),
        )
        for class_id in range(5):
            for sid in range(4):
                s = render_sample(cfg, class_id, class_id * 4 + sid, seed=7)
                frac = s.mask.mean()
                assert cfg.min_fg_frac <= frac <= cfg.max_fg_frac

    def test_five_shape_classes(self):
        assert len(SHAPE_NAMES) == 5
        assert len(set(SHAPE_NAMES)) == 5


class TestConfigValidation:
    def test_overlapping_splits_raise(self):
        with pytest.raises(ValueError):
            tiny_synth_config(train_classes=(0, 1), test_classes=(1, 2))

    def test_uncovered_class_raises(self):
        with pytest.raises(ValueError):
            tiny_synth_config(train_classes=(0,), test_classes=(2,))

    def test_header_round_trip(self):
        cfg = tiny_synth_config(noise_amp=0.21, correlated_bg=True)
        assert SyntheticConfig.from_header(dict(cfg.header_items())) == cfg


class TestPnmIO:
    def test_ppm_round_trip_exact_on_grid(self, tmp_path):
        # values on the k/255 grid survive the byte round trip exactly
        rng = np.random.default_rng(0)
        img = (rng.integers(0, 256, (3, 7, 9)) / 255.0).astype(F32)
        path = tmp_path / "x.ppm"
        write_ppm(path, img)
        back = read_ppm(path)
        assert back.shape == (3, 7, 9)
        assert np.abs(back - img).max() <= 1e-6

    def test_ppm_quantization_bound(self, tmp_path):
        rng = np.random.default_rng(1)
        img = rng.uniform(0, 1, (3, 5, 5)).astype(F32)
        path = tmp_path / "x.ppm"
        write_ppm(path, img)
        assert np.abs(read_ppm(path) - img).max() <= 0.5 / 255.0 + 1e-6

    def test_ppm_rejects_out_of_range(self, tmp_path):
        with pytest.raises(ValueError):
            write_ppm(tmp_path / "x.ppm", np.full((3, 4, 4), 1.5, dtype=F32))

    def test_pgm_round_trip(self, tmp_path):
        mask = (np.arange(20).reshape(4, 5) % 3 == 0).astype(np.uint8)
        path = tmp_path / "m.pgm"
        write_pgm(path, mask)
        assert np.array_equal(read_pgm(path), mask)

    def test_pgm_rejects_nonbinary_write(self, tmp_path):
        mask = np.full((4, 4), 17, dtype=np.uint8)
        with pytest.raises(ValueError):
            write_pgm(tmp_path / "m.pgm", mask)

    def test_pgm_rejects_nonbilevel_read(self, tmp_path):
        path = tmp_path / "m.pgm"
        payload = bytes([0, 255, 17, 255])
        path.write_bytes(b"P5\n2 2\n255\n" + payload)
        with pytest.raises(ValueError):
            read_pgm(path)

    def test_pnm_comments_and_whitespace(self, tmp_path):
        path = tmp_path / "m.pgm"
        path.write_bytes(b"P5\n# a comment\n 2\t2 \n255\n" + bytes([0, 255, 255, 0]))
        assert np.array_equal(read_pgm(path), np.array([[0, 1], [1, 0]], dtype=np.uint8))

    def test_wrong_magic_raises(self, tmp_path):
        path = tmp_path / "m.pgm"
        path.write_bytes(b"P4\n2 2\n255\n\x00\x00\x00\x00")
        with pytest.raises(ValueError):
            read_pgm(path)


class TestManifest:
    def test_round_trip(self, tiny_dataset, tmp_path):
        path = tmp_path / "manifest.txt"
        write_manifest(tiny_dataset, path)
        back = read_manifest(path)
        assert back.config == tiny_dataset.config
        assert back.seed == tiny_dataset.seed
        assert back.records == tiny_dataset.records

    def test_duplicate_sample_id_raises(self, tmp_path):
        cfg = tiny_synth_config()
        rec = ManifestRecord(0, 0, "images/a.ppm", "masks/a.pgm")
        man = DatasetManifest(config=cfg, seed=0, records=[rec, rec])
        path = tmp_path / "manifest.txt"
        write_manifest(man, path)
        with pytest.raises(ValueError, match="duplicate"):
            read_manifest(path)

    def test_by_class_partition(self, tiny_dataset):
        cfg = tiny_dataset.config
        for c in range(cfg.n_classes):
            recs = tiny_dataset.by_class(c)
            assert len(recs) == cfg.samples_per_class
            assert all(r.class_id == c for r in recs)


class TestGeneration:
    def test_thread_count_byte_identity(self, tmp_path):
        cfg = tiny_synth_config(samples_per_class=3)
        dir_a, dir_b = tmp_path / "a", tmp_path / "b"
        generate_dataset(cfg, seed=5, out_dir=dir_a, threads=1)
        generate_dataset(cfg, seed=5, out_dir=dir_b, threads=4)
        files_a = sorted(p.relative_to(dir_a) for p in dir_a.rglob("*") if p.is_file())
        files_b = sorted(p.relative_to(dir_b) for p in dir_b.rglob("*") if p.is_file())
        assert files_a == files_b
        for rel in files_a:
            assert (dir_a / rel).read_bytes() == (dir_b / rel).read_bytes(), rel

    def test_masks_decodable_and_nonempty(self, tiny_dataset):
        for rec in tiny_dataset.records[:4]:
            mask = read_pgm(Path(tiny_dataset.root) / rec.mask_path)
            assert 0 < mask.sum() < mask.size


class TestEpisodes:
    def test_sampler_respects_class_set(self, tiny_dataset):
        sampler = EpisodeSampler(tiny_dataset, class_set=(2,))
        rng = np.random.default_rng(0)
        for _ in range(10):
            ep = sampler.sample(k=1, rng=rng)
            assert ep.class_id == 2

    def test_query_never_among_supports(self, tiny_dataset):
        sampler = EpisodeSampler(tiny_dataset, class_set=(0, 1))
        rng = np.random.default_rng(1)
        for _ in range(20):
            ep = sampler.sample(k=2, rng=rng)
            sids = {s.sample_id for s in ep.supports}
            assert len(sids) == 2
            assert ep.query.sample_id not in sids

    def test_deterministic_given_rng_state(self, tiny_dataset):
        eps_a = [
            EpisodeSampler(tiny_dataset, (0, 1)).sample(1, np.random.default_rng(9))
            for _ in range(1)
        ]
        eps_b = [
            EpisodeSampler(tiny_dataset, (0, 1)).sample(1, np.random.default_rng(9))
            for _ in range(1)
        ]
        assert eps_a[0].query.sample_id == eps_b[0].query.sample_id
        assert [s.sample_id for s in eps_a[0].supports] == [
            s.sample_id for s in eps_b[0].supports
        ]

    def test_k_too_large_raises(self, tiny_dataset):
        sampler = EpisodeSampler(tiny_dataset, class_set=(0,))
        n = len(sampler.records_for(0))
        with pytest.raises(ValueError):
            sampler.sample(k=n, rng=np.random.default_rng(0))

    def test_empty_class_set_raises(self, tiny_dataset):
        with pytest.raises(ValueError):
            EpisodeSampler(tiny_dataset, class_set=())

    def test_episode_validation(self):
        img = np.full((3, 4, 4), 0.5, dtype=F32)
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[1:3, 1:3] = 1
        mk = lambda sid: ImageSample(image=img, mask=mask, class_id=0, sample_id=sid)
        with pytest.raises(ValueError, match="differ"):
            Episode(query=mk(1), supports=[mk(1)], class_id=0).validate()
        Episode(query=mk(1), supports=[mk(1)], class_id=0).validate(allow_identical=True)
        with pytest.raises(ValueError, match="share"):
            Episode(query=mk(0), supports=[mk(1)], class_id=3).validate()


class TestAugmentation:
    def test_p_zero_returns_input_unchanged(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 1, (3, 8, 8)).astype(F32)
        out = ica_augment(img, 0.0, rng)
        assert out is img

    def test_p_one_collapses_channels(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 1, (3, 8, 8)).astype(F32)
        out = ica_augment(img, 1.0, np.random.default_rng(1))
        expect = img.mean(axis=0, dtype=F32)
        for c in range(3):
            assert np.array_equal(out[c], expect)

    def test_gray_image_is_fixed_point(self):
        gray = np.full((3, 6, 6), 0.25, dtype=F32)
        out = ica_augment(gray, 1.0, np.random.default_rng(0))
        assert np.array_equal(out, gray)

    def test_invalid_prob_raises(self):
        img = np.zeros((3, 4, 4), dtype=F32)
        with pytest.raises(ValueError):
            ica_augment(img, 1.5, np.random.default_rng(0))

    def test_rng_consumption_matches_probability(self):
        # same generator state: switch happens iff draw < p
        img = np.random.default_rng(3).uniform(0, 1, (3, 4, 4)).astype(F32)
        draw = np.random.default_rng(11).random()
        p_hit, p_miss = min(draw + 0.05, 1.0), draw / 2.0
        hit = ica_augment(img, p_hit, np.random.default_rng(11))
        miss = ica_augment(img, p_miss, np.random.default_rng(11))
        assert not np.array_equal(hit, img)
        assert miss is img


class TestSchedule:
    def test_initial_value(self):
        assert switch_prob_schedule(0) == 0.25

    def test_half_life(self):
        assert abs(switch_prob_schedule(45) - 0.125) <= 1e-12
        assert abs(switch_prob_schedule(90) - 0.0625) <= 1e-12

    def test_monotone_decay(self):
        vals = [switch_prob_schedule(e) for e in range(0, 120, 10)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_negative_epoch_raises(self):
        with pytest.raises(ValueError):
            switch_prob_schedule(-1)
