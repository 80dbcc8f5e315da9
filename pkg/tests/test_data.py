import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from midccnn.data import (
    GLYPHS,
    HAVE_PNG,
    EvalReport,
    ImageFormatError,
    LabeledDataset,
    confusion_matrix,
    evaluate_oa,
    glyph_box,
    load_image_dir,
    overall_accuracy,
    protocol,
    read_image,
    resize_bilinear,
    save_image_dir,
    stratified_split,
    synth_generate,
    write_ppm,
)
from midccnn.tensor import Tensor


def toy_dataset(per_class=(100, 100, 100), size=4, seed=0):
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.full(n, c) for c, n in enumerate(per_class)])
    images = rng.random((len(labels), 3, size, size))
    return LabeledDataset([f"c{c}" for c in range(len(per_class))], images, labels)


class FixedPredictor:
    """Returns preset probability rows, in order, regardless of the input pixels."""

    def __init__(self, rows, num_classes):
        self.rows = np.asarray(rows, dtype=float)
        self.num_classes = num_classes
        self.pos = 0

    def eval(self):
        return self

    def __call__(self, x):
        out = self.rows[self.pos:self.pos + x.shape[0]]
        self.pos += x.shape[0]
        return Tensor(out)


def test_pgm_is_replicated_to_three_channels(tmp_path):
    path = tmp_path / "g.pgm"
    path.write_bytes(b"P5\n# comment\n3 2\n255\n" + bytes([0, 51, 102, 153, 204, 255]))
    img = read_image(path)
    assert img.shape == (3, 2, 3)
    assert np.array_equal(img[0], img[1]) and np.array_equal(img[0], img[2])
    assert img[0].tolist() == [[0.0, 0.2, 0.4], [0.6, 0.8, 1.0]]


def test_ascii_ppm(tmp_path):
    path = tmp_path / "a.ppm"
    path.write_text("P3\n1 1\n10\n10 5 0\n")
    assert read_image(path)[:, 0, 0].tolist() == [1.0, 0.5, 0.0]


def test_ppm_round_trip(tmp_path):
    img = np.round(np.random.default_rng(0).random((3, 5, 7)) * 255) / 255
    write_ppm(tmp_path / "x.ppm", img)
    assert np.array_equal(read_image(tmp_path / "x.ppm"), img)


def test_bad_images(tmp_path):
    (tmp_path / "junk.ppm").write_bytes(b"hello")
    with pytest.raises(ImageFormatError, match="junk.ppm"):
        read_image(tmp_path / "junk.ppm")
    (tmp_path / "short.ppm").write_bytes(b"P6\n4 4\n255\n" + bytes(10))
    with pytest.raises(ImageFormatError, match="truncated"):
        read_image(tmp_path / "short.ppm")


@pytest.mark.skipif(not HAVE_PNG, reason="Pillow not installed")
def test_png_gray(tmp_path):
    from PIL import Image

    Image.fromarray(np.full((4, 6), 255, dtype=np.uint8), mode="L").save(tmp_path / "w.png")
    img = read_image(tmp_path / "w.png")
    assert img.shape == (3, 4, 6) and np.all(img == 1.0)


@pytest.mark.parametrize("size", [7, 32, 96, 224])
def test_resize_constant(size):
    img = np.full((3, 13, 29), 0.37)
    out = resize_bilinear(img, size)
    assert out.shape == (3, size, size)
    assert np.all(out == 0.37)


def test_resize_linear_ramp_and_identity():
    ramp = np.broadcast_to(np.arange(4.0), (1, 4, 4)).copy()
    assert np.array_equal(resize_bilinear(ramp, 4), ramp)
    up = resize_bilinear(ramp, 8)[0, 0]
    assert up.tolist() == [0.0, 0.25, 0.75, 1.25, 1.75, 2.25, 2.75, 3.0]


def test_load_image_dir(tmp_path):
    ds = synth_generate(3, 4, 32, seed=1)
    save_image_dir(ds, tmp_path)
    loaded = load_image_dir(tmp_path, 64)
    assert loaded.class_names == sorted(ds.class_names)
    assert len(loaded) == 12 and loaded.images.shape == (12, 3, 64, 64)
    assert np.all((loaded.images >= 0) & (loaded.images <= 1))


def test_load_ucm_like_layout(tmp_path):
    rng = np.random.default_rng(0)
    for c in range(21):
        d = tmp_path / f"class{c:02d}"
        d.mkdir()
        for i in range(100):
            write_ppm(d / f"{i}.ppm", rng.random((3, 2, 2)))
    ds = load_image_dir(tmp_path, 32)
    assert (len(ds), ds.num_classes) == (2100, 21)


def test_load_errors(tmp_path):
    (tmp_path / "a").mkdir()
    with pytest.raises(ValueError, match="no images"):
        load_image_dir(tmp_path, 32)
    with pytest.raises(FileNotFoundError):
        load_image_dir(tmp_path / "missing", 32)


def test_split_counts():
    train, test = stratified_split(toy_dataset(), 0.8, seed=3)
    assert np.bincount(train.labels).tolist() == [80, 80, 80]
    assert np.bincount(test.labels).tolist() == [20, 20, 20]


@settings(max_examples=40, deadline=None)
@given(
    counts=st.lists(st.integers(2, 30), min_size=2, max_size=5),
    ratio=st.floats(0.05, 0.95),
    seed=st.integers(0, 1000),
)
def test_split_is_exact_partition(counts, ratio, seed):
    ds = toy_dataset(counts, size=1)
    ds.source_ids = [f"item{i}" for i in range(len(ds))]
    train, test = stratified_split(ds, ratio, seed)
    ids = train.source_ids + test.source_ids
    assert sorted(ids) == sorted(ds.source_ids) and len(set(ids)) == len(ids)
    for c, n in enumerate(counts):
        assert int(np.sum(train.labels == c)) == int(np.floor(ratio * n))
    again = stratified_split(ds, ratio, seed)
    assert again[0].source_ids == train.source_ids


def test_split_errors():
    with pytest.raises(ValueError, match="at least 2"):
        stratified_split(toy_dataset((5, 1)), 0.5, 0)
    with pytest.raises(ValueError):
        stratified_split(toy_dataset(), 1.0, 0)


def test_synth_counts_and_determinism():
    a = synth_generate(3, 100, 96, seed=7)
    assert len(a) == 300 and a.num_classes == 3 and a.images.shape[1:] == (3, 96, 96)
    assert np.bincount(a.labels).tolist() == [100, 100, 100]
    b = synth_generate(3, 100, 96, seed=7)
    assert a.images.tobytes() == b.images.tobytes() and a.source_ids == b.source_ids
    assert synth_generate(3, 100, 96, seed=8).images.tobytes() != a.images.tobytes()


def test_synth_glyph_inside_and_drawn():
    ds = synth_generate(8, 10, 64, seed=2)
    assert len(GLYPHS) >= 8
    for img, sid in zip(ds.images, ds.source_ids):
        y0, x0, y1, x1 = glyph_box(sid, 64)
        assert 0 <= y0 < y1 <= 64 and 0 <= x0 < x1 <= 64
        # the glyph's stroke colour is the brightest uniform value in its box
        box = img[:, y0:y1, x0:x1]
        assert np.max(box) >= 0.85


def test_glyph_box_from_file_name():
    assert glyph_box("ring/ring_0003@5,17.ppm", 96) == (5, 17, 29, 41)


def test_synth_errors():
    with pytest.raises(ValueError, match="glyph"):
        synth_generate(99, 1, 96, 0)
    with pytest.raises(ValueError):
        synth_generate(3, 1, 100, 0)


def test_confusion_hand_built():
    labels = np.array([0, 0, 1, 2])
    preds = np.array([0, 1, 1, 0])
    cm = confusion_matrix(labels, preds, 3)
    assert cm.tolist() == [[1, 1, 0], [0, 1, 0], [1, 0, 0]]
    assert overall_accuracy(labels, preds) == 50.0
    assert cm.sum(axis=1).tolist() == [2, 1, 1]


def test_evaluate_oa_with_fixed_predictions():
    ds = toy_dataset((2, 1, 1), size=2)
    rows = [[0.6, 0.4, 0.0], [0.5, 0.5, 0.0], [0.1, 0.8, 0.1], [0.4, 0.3, 0.3]]
    oa, cm = evaluate_oa(FixedPredictor(rows, 3), ds, batch_size=3)
    # the [0.5, 0.5] tie goes to class 0
    assert oa == 75.0
    assert cm.tolist() == [[2, 0, 0], [0, 1, 0], [1, 0, 0]]


def test_evaluate_oa_extremes_and_errors():
    ds = toy_dataset((2, 2), size=2)
    correct = np.eye(2)[ds.labels]
    assert evaluate_oa(FixedPredictor(correct, 2), ds)[0] == 100.0
    assert evaluate_oa(FixedPredictor(1 - correct, 2), ds)[0] == 0.0
    with pytest.raises(ValueError, match="empty"):
        evaluate_oa(FixedPredictor(correct, 2), ds.subset([]))


def test_uniform_random_predictor_oa():
    ds = toy_dataset((334, 333, 333), size=1)
    rows = np.random.default_rng(42).random((1000, 3))
    oa, _ = evaluate_oa(FixedPredictor(rows, 3), ds)
    assert abs(oa - 100 / 3) < 3


def test_protocol_with_mocked_classifier():
    ds = toy_dataset((10, 10), size=1)
    ds.source_ids = [f"i{i}" for i in range(20)]
    seen = []

    def run(train, test, r):
        seen.append(sorted(test.source_ids))
        return 100.0, np.diag(np.bincount(test.labels, minlength=2))

    report = protocol(ds, 0.8, 10, run, split_seed=5)
    assert report.per_rep_oa == [100.0] * 10 and report.mean_oa == 100.0 and report.std_oa == 0.0
    assert len(set(map(tuple, seen))) > 1
    assert seen[3] == sorted(stratified_split(ds, 0.8, 8)[1].source_ids)
    doc = json.loads(report.to_json())
    assert set(doc) == {"per_rep_oa", "mean_oa", "std_oa", "confusion"}
    assert np.sum(doc["confusion"]) == 4


def test_eval_report_sample_std():
    r = EvalReport.from_runs([96.0, 97.0, 98.0], np.zeros((2, 2)))
    assert r.mean_oa == 97.0 and r.std_oa == 1.0
    assert EvalReport.from_runs([90.0], np.zeros((2, 2))).std_oa == 0.0
    with pytest.raises(ValueError):
        protocol(toy_dataset(), 0.8, 0, lambda *a: None)
