from collections import Counter

import numpy as np
import pytest

from modnet.dataset import (DatasetError, FAST_OVERRIDES, GenConfig,
                            MICRO_OVERRIDES, generate_dataset, load_config,
                            load_image, load_manifest)
from modnet.imageio import (ImageFormatError, read_pgm, read_ppm, write_pgm,
                            write_ppm)
from modnet.query import parse_query
from modnet.scenes import oracle_answer, scene_from_image


@pytest.fixture(scope="module")
def micro(tmp_path_factory):
    out = tmp_path_factory.mktemp("micro_data")
    config = GenConfig(**MICRO_OVERRIDES)
    manifest = generate_dataset(config, out)
    return out, config, manifest


class TestGenConfig:
    def test_text_round_trip(self):
        config = GenConfig(**FAST_OVERRIDES)
        assert GenConfig.from_text(config.to_text()) == config

    def test_unknown_key_rejected(self):
        with pytest.raises(DatasetError, match="unknown key"):
            GenConfig.from_text("grid=3\nsparkles=9\n")

    def test_non_integer_rejected(self):
        with pytest.raises(DatasetError, match="integer"):
            GenConfig.from_text("questions=many\n")

    def test_overrides_beat_file(self):
        config = GenConfig.from_text("questions=100\n", {"questions": 61})
        assert config.questions == 61

    def test_bad_bounds(self):
        with pytest.raises(DatasetError):
            GenConfig(min_shapes=7, max_shapes=3)
        with pytest.raises(DatasetError):
            GenConfig(test_pairs=244 * 64)
        with pytest.raises(DatasetError):
            GenConfig(grid=4)

    def test_hash_tracks_content(self):
        assert GenConfig().hash() != GenConfig(seed=1).hash()


class TestGeneratedDataset:
    def test_counts(self, micro):
        _, config, manifest = micro
        assert len(manifest.records) == config.questions * config.images_per_question
        assert len(manifest.split_records("test")) == config.test_pairs

    def test_labels_reverify_against_oracle(self, micro):
        out, _, manifest = micro
        for record in manifest.records:
            scene = scene_from_image(load_image(out, record))
            assert oracle_answer(scene, parse_query(record.query)) == record.answer

    def test_no_scene_is_shared_across_splits(self, micro):
        out, _, manifest = micro
        seen = {}
        for record in manifest.records:
            scene = scene_from_image(load_image(out, record)).serialize()
            assert scene not in seen, "scene reused"
            seen[scene] = record.split

    def test_no_duplicate_question_image_pairs(self, micro):
        _, _, manifest = micro
        keys = [(r.question, r.image_path) for r in manifest.records]
        assert len(set(keys)) == len(keys)

    def test_round_trip_load(self, micro):
        out, _, manifest = micro
        loaded = load_manifest(out)
        assert loaded.records == manifest.records
        assert loaded.config_hash == manifest.config_hash

    def test_hash_mismatch_detected(self, micro, tmp_path):
        out, config, _ = micro
        copy = tmp_path / "tampered"
        copy.mkdir()
        for name in ("manifest.tsv", "meta.txt"):
            (copy / name).write_text((out / name).read_text())
        (copy / "config.txt").write_text(GenConfig(seed=99).to_text())
        with pytest.raises(DatasetError, match="hash"):
            load_manifest(copy)

    def test_per_question_balance(self, micro):
        _, config, manifest = micro
        by_question = {}
        for r in manifest.records:
            by_question.setdefault(r.question, []).append(r.answer)
        half = config.images_per_question // 2
        for answers in by_question.values():
            counts = Counter(answers)
            assert len(answers) == config.images_per_question
            if counts["yes"] == 0 or counts["no"] == 0:
                continue  # constant-answer question, recorded as imbalanced
            assert counts["yes"] == half

    def test_config_file_written(self, micro):
        out, config, _ = micro
        assert load_config(out) == config


class TestSplitStratification:
    def test_fast_config_split_shares(self, fast_dataset):
        _, config, manifest = fast_dataset
        test = manifest.split_records("test")
        shares = Counter(r.layout_size for r in test)
        total = sum(shares.values())
        assert total == config.test_pairs
        assert abs(shares[4] / total - 0.31) <= 0.05
        assert abs(shares[5] / total - 0.56) <= 0.05
        assert abs(shares[6] / total - 0.13) <= 0.05

    def test_majority_rate_bounded(self, fast_dataset):
        _, _, manifest = fast_dataset
        answers = Counter(r.answer for r in manifest.records)
        majority_rate = max(answers.values()) / len(manifest.records)
        assert majority_rate <= 0.63 + 0.05


class TestImageIO:
    def test_ppm_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        image = rng.integers(0, 256, size=(30, 30, 3), dtype=np.uint8)
        path = tmp_path / "x.ppm"
        write_ppm(path, image)
        assert np.array_equal(read_ppm(path), image)

    def test_pgm_round_trip(self, tmp_path):
        rng = np.random.default_rng(1)
        image = rng.integers(0, 256, size=(9, 9), dtype=np.uint8)
        path = tmp_path / "x.pgm"
        write_pgm(path, image)
        assert np.array_equal(read_pgm(path), image)

    def test_header_contract(self, tmp_path):
        image = np.zeros((2, 4, 3), dtype=np.uint8)
        path = tmp_path / "tiny.ppm"
        write_ppm(path, image)
        assert path.read_bytes().startswith(b"P6\n4 2\n255\n")

    def test_truncated_raster_rejected(self, tmp_path):
        path = tmp_path / "bad.ppm"
        path.write_bytes(b"P6\n4 4\n255\n\x00\x00")
        with pytest.raises(ImageFormatError, match="raster"):
            read_ppm(path)

    def test_wrong_magic_rejected(self, tmp_path):
        path = tmp_path / "bad2.ppm"
        path.write_bytes(b"P5\n1 1\n255\n\x00")
        with pytest.raises(ImageFormatError, match="expected P6"):
            read_ppm(path)

    def test_wrong_dtype_rejected(self, tmp_path):
        with pytest.raises(ImageFormatError):
            write_ppm(tmp_path / "f.ppm", np.zeros((2, 2, 3), dtype=float))
