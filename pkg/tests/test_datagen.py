"""Synthetic scene generation and dataset loading."""

import json

import numpy as np
import pytest

from fusecount.datagen import (
    DatasetIndex,
    SceneSpec,
    density_level,
    generate_dataset,
    generate_scene,
    load_dataset,
    load_pair,
)
from fusecount.density import count_from_map, generate_density_map


class TestGenerateScene:
    def test_empty_scene_is_pure_background(self):
        spec = SceneSpec(n_people=0, seed=3)
        pair = generate_scene(spec)
        assert len(pair.dots) == 0
        assert pair.thermal.data.max() < 0.3  # no bright blobs

    def test_same_seed_identical(self):
        a = generate_scene(SceneSpec(n_people=9, seed=11))
        b = generate_scene(SceneSpec(n_people=9, seed=11))
        np.testing.assert_array_equal(a.visible.data, b.visible.data)
        np.testing.assert_array_equal(a.thermal.data, b.thermal.data)
        assert a.dots.points == b.dots.points

    def test_people_count_and_bounds(self):
        pair = generate_scene(SceneSpec(n_people=30, image_size=(96, 96), seed=5))
        assert len(pair.dots) == 30
        for x, y in pair.dots.points:
            assert 0 <= x < 96 and 0 <= y < 96

    def test_thermal_blobs_at_annotations(self):
        spec = SceneSpec(n_people=5, seed=8, spread=10.0)
        pair = generate_scene(spec)
        background = 0.12 + 0.05
        for x, y in pair.dots.points:
            assert pair.thermal.data[0, round(y), round(x)] > background + 0.3

    def test_capacity_error(self):
        with pytest.raises(ValueError, match="capacity"):
            SceneSpec(image_size=(16, 16), n_people=500)

    def test_dark_dims_visible_only(self):
        light = generate_scene(SceneSpec(n_people=8, seed=21, illumination="light"))
        dark = generate_scene(SceneSpec(n_people=8, seed=21, illumination="dark_and_dust"))
        assert dark.visible.data.mean() < light.visible.data.mean()
        np.testing.assert_array_equal(dark.thermal.data, light.thermal.data)

    def test_unknown_illumination_rejected(self):
        with pytest.raises(ValueError, match="illumination"):
            SceneSpec(illumination="noon")


class TestDensityLevelTag:
    @pytest.mark.parametrize("n,expected", [
        (0, "low"), (49, "low"), (50, "medium"), (150, "medium"), (151, "high"),
    ])
    def test_thresholds(self, n, expected):
        assert density_level(n) == expected


class TestDatasetRoundTrip:
    def test_generate_write_load(self, tmp_path):
        generate_dataset(tmp_path, "train", count=8, seed=100)
        index = load_dataset(tmp_path, "train")
        assert len(index) == 8
        for entry in index.entries:
            assert entry.metadata["illumination"] in ("light", "dark_and_dust")
            assert entry.metadata["density_level"] == density_level(entry.metadata["n_people"])

    def test_round_trip_count_conservation(self, tmp_path):
        generate_dataset(tmp_path, "train", count=4, seed=7, people_range=(6, 18))
        index = load_dataset(tmp_path, "train")
        for entry in index.entries:
            pair = load_pair(entry)
            dm = generate_density_map(pair.dots, sigma=1.5)
            n = len(pair.dots)
            assert abs(count_from_map(dm) - n) <= 0.005 * max(n, 1)

    def test_empty_split_warns_and_returns_empty(self, tmp_path, caplog):
        for sub in ("rgb", "tir", "gt"):
            (tmp_path / "test" / sub).mkdir(parents=True)
        with caplog.at_level("WARNING"):
            index = load_dataset(tmp_path, "test")
        assert len(index) == 0
        assert any("empty" in record.message for record in caplog.records)

    def test_missing_counterpart_names_stem(self, tmp_path):
        generate_dataset(tmp_path, "train", count=2, seed=1)
        index = load_dataset(tmp_path, "train")
        victim = index.entries[0].thermal_path
        victim.unlink()
        with pytest.raises(FileNotFoundError, match=victim.stem):
            load_dataset(tmp_path, "train")

    def test_corrupt_annotation_names_file(self, tmp_path):
        generate_dataset(tmp_path, "train", count=1, seed=2)
        index = load_dataset(tmp_path, "train")
        bad = index.entries[0].annotation_path
        bad.write_text("{{{")
        with pytest.raises(ValueError, match=bad.name):
            load_dataset(tmp_path, "train")

    def test_density_tag_mismatch_rejected(self, tmp_path):
        import json as json_mod
        generate_dataset(tmp_path, "train", count=1, seed=4)
        meta_path = tmp_path / "train" / "metadata.json"
        table = json_mod.loads(meta_path.read_text())
        for stem in table:
            table[stem]["density_level"] = "high"
        meta_path.write_text(json_mod.dumps(table))
        with pytest.raises(ValueError, match="tagged 'high'"):
            load_dataset(tmp_path, "train")

    def test_deterministic_directory_bytes(self, tmp_path):
        generate_dataset(tmp_path / "a", "train", count=3, seed=55)
        generate_dataset(tmp_path / "b", "train", count=3, seed=55)
        files_a = sorted((tmp_path / "a").rglob("*.png")) + sorted((tmp_path / "a").rglob("*.json"))
        files_b = sorted((tmp_path / "b").rglob("*.png")) + sorted((tmp_path / "b").rglob("*.json"))
        assert [f.name for f in files_a] == [f.name for f in files_b]
        for fa, fb in zip(files_a, files_b):
            assert fa.read_bytes() == fb.read_bytes()
