import json
import logging

import numpy as np
import pytest

from hrcloud.data import (
    ManifestError,
    load_manifest,
    read_image,
    read_mask,
    write_image,
    write_manifest,
    write_mask,
    write_probability,
)


def _scene(tmp_path, name, rng, size=8):
    img = tmp_path / f"{name}.png"
    mask = tmp_path / f"{name}_mask.png"
    write_image(img, rng.random((size, size, 3)))
    write_mask(mask, rng.random((size, size)) > 0.5)
    return img.name, mask.name


def test_manifest_64_scenes(tmp_path, rng):
    entries = []
    for i in range(64):
        img, mask = _scene(tmp_path, f"s{i:02d}", rng, size=4)
        entries.append((img, mask, "train" if i < 44 else "test"))
    write_manifest(tmp_path / "m.jsonl", entries)
    m = load_manifest(tmp_path / "m.jsonl")
    assert len(m) == 64
    assert len(m.split("train")) == 44 and len(m.split("test")) == 20
    assert m.entries[0].scene_id == "s00"


def test_empty_manifest_warns(tmp_path, caplog):
    (tmp_path / "empty.jsonl").write_text("")
    with caplog.at_level(logging.WARNING):
        m = load_manifest(tmp_path / "empty.jsonl")
    assert len(m) == 0
    assert "no entries" in caplog.text


def test_missing_label_path_named(tmp_path, rng):
    img, _ = _scene(tmp_path, "a", rng)
    (tmp_path / "m.jsonl").write_text(json.dumps({"image": img, "mask": "nope.png", "split": "train"}) + "\n")
    with pytest.raises(FileNotFoundError, match="nope.png"):
        load_manifest(tmp_path / "m.jsonl")


def test_parse_error_reports_line(tmp_path, rng):
    img, mask = _scene(tmp_path, "a", rng)
    good = json.dumps({"image": img, "mask": mask, "split": "train"})
    (tmp_path / "m.jsonl").write_text(good + "\n\n{not json\n")
    with pytest.raises(ManifestError) as exc:
        load_manifest(tmp_path / "m.jsonl")
    assert exc.value.lineno == 3


@pytest.mark.parametrize(
    "record, message",
    [
        ({"image": "a.png", "mask": "a_mask.png", "split": "val"}, "split"),
        ({"mask": "a_mask.png"}, "image"),
        ({"image": "a.png", "mask": "a_mask.png", "extra": 1}, "unknown"),
    ],
)
def test_invalid_records(tmp_path, rng, record, message):
    _scene(tmp_path, "a", rng)
    (tmp_path / "m.jsonl").write_text(json.dumps(record) + "\n")
    with pytest.raises(ManifestError, match=message):
        load_manifest(tmp_path / "m.jsonl")


def test_duplicate_scene_ids(tmp_path, rng):
    img, mask = _scene(tmp_path, "a", rng)
    write_manifest(tmp_path / "m.jsonl", [(img, mask, "train"), (img, mask, "test")])
    with pytest.raises(ManifestError, match="duplicate"):
        load_manifest(tmp_path / "m.jsonl")


def test_image_and_mask_io(tmp_path, rng):
    pix = rng.integers(0, 256, (5, 6, 3)).astype(np.float32) / 255
    write_image(tmp_path / "x.png", pix)
    scene = read_image(tmp_path / "x.png")
    np.testing.assert_array_equal(scene.pixels, pix)
    assert scene.scene_id == "x"

    write_mask(tmp_path / "m.png", np.array([[0, 1], [1, 0]]))
    np.testing.assert_array_equal(read_mask(tmp_path / "m.png").labels, [[0, 1], [1, 0]])


def test_probability_quantization(tmp_path):
    p = np.array([[0.0, 0.5, 1.0, 0.2]])
    write_probability(tmp_path / "p.png", p)
    from PIL import Image

    assert np.asarray(Image.open(tmp_path / "p.png")).tolist() == [[0, 128, 255, 51]]
