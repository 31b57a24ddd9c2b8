import json

import numpy as np
import pytest

from mga.corpus import (CorpusFormatError, PairedExample, SyntheticConfig, corpus_classes,
                        label_matrix, labels_to_report, load_corpus, read_pgm, save_corpus, split,
                        synth_generate)
from mga.knowledge import sentence_polarity, split_report


def test_synthetic_is_deterministic():
    cfg = SyntheticConfig()
    a, b = synth_generate(cfg, 5, 3), synth_generate(cfg, 5, 3)
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.image, y.image)
        assert (x.report, x.labels, x.boxes, x.id) == (y.report, y.labels, y.boxes, y.id)


def test_reports_agree_with_labels(tiny_corpus):
    classes = list(tiny_corpus[0].labels)
    for ex in tiny_corpus:
        pols = dict(sentence_polarity(s, classes) for s in split_report(ex.report))
        assert pols == ex.labels
        assert {b.label for b in ex.boxes} == {c for c, v in ex.labels.items() if v == 1}


def test_absent_findings_give_negative_report():
    cfg = SyntheticConfig(presence_rate=0.0)
    ex = synth_generate(cfg, 1, 0)[0]
    assert ex.boxes == []
    assert ex.report == "There is no edema. There is no pneumonia. There is no effusion. There is no cardiomegaly."


def test_boxes_hold_bright_pixels(tiny_corpus):
    # a present bump peaks at 1 while background stays below the noise amplitude
    noise = 0.2
    for ex in tiny_corpus:
        for b in ex.boxes:
            region = ex.image[b.y:b.y + b.h, b.x:b.x + b.w]
            assert region.max() > ex.image.mean() + noise


def test_fixed_quadrants(tiny_corpus):
    side = tiny_corpus[0].image.shape[0]
    classes = list(tiny_corpus[0].labels)
    for ex in tiny_corpus:
        for b in ex.boxes:
            q = classes.index(b.label) % 4
            cx, cy = b.x + b.w / 2, b.y + b.h / 2
            assert (cx >= side / 2) == bool(q % 2)
            assert (cy >= side / 2) == bool(q // 2)


def test_synthetic_config_validation():
    with pytest.raises(ValueError):
        SyntheticConfig(classes=("a",))
    with pytest.raises(ValueError):
        SyntheticConfig(image_side=16)
    assert SyntheticConfig.with_classes(10).classes[-1] == "finding9"


def test_labels_to_report():
    assert labels_to_report({"edema": 1, "pneumonia": 0}) == "There is edema. There is no pneumonia."
    assert labels_to_report({"a": 1, "b": -1}) == "There is a."
    with pytest.raises(ValueError):
        labels_to_report({"a": -1})


def test_label_matrix_marks_missing():
    exs = [PairedExample("a", np.zeros((2, 2)), "x", {"edema": 1}),
           PairedExample("b", np.zeros((2, 2)), "x", None)]
    np.testing.assert_array_equal(label_matrix(exs, ["edema", "nodule"]), [[1, -1], [-1, -1]])
    assert corpus_classes(exs) == ["edema"]


def test_corpus_round_trip(tmp_path, tiny_corpus):
    path = tmp_path / "c.jsonl"
    save_corpus(tiny_corpus[:5], path)
    back = load_corpus(path)
    for x, y in zip(tiny_corpus, back):
        np.testing.assert_array_equal(x.image, y.image)
        assert (x.id, x.report, x.labels, x.boxes) == (y.id, y.report, y.labels, y.boxes)


def _write(path, records):
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n")


def test_missing_report_names_record(tmp_path):
    path = tmp_path / "bad.jsonl"
    good = {"id": "a", "image": [[0.0, 1.0]], "report": "x"}
    _write(path, [good, {"id": "b", "image": [[0.0]]}])
    with pytest.raises(CorpusFormatError, match="record 2.*report"):
        load_corpus(path)


@pytest.mark.parametrize("record", [
    {"id": "a", "image": [[0.0]], "report": "x", "labels": {"edema": 2}},
    {"id": "a", "image": [[0.0, 2.0]], "report": "x"},
    {"id": "a", "image": [[0.0]], "report": "x", "boxes": [{"x": 0, "y": 0, "w": 3, "h": 1}]},
    {"id": "a", "image": [[0.0]], "report": "   "},
])
def test_invalid_records_rejected(tmp_path, record):
    path = tmp_path / "bad.jsonl"
    _write(path, [record])
    with pytest.raises(CorpusFormatError):
        load_corpus(path)


def test_pgm_image_reference(tmp_path):
    pixels = np.array([[0, 128], [255, 64]], dtype=np.uint8)
    (tmp_path / "img.pgm").write_bytes(b"P5\n# comment\n2 2\n255\n" + pixels.tobytes())
    (tmp_path / "ascii.pgm").write_text("P2\n2 2\n255\n0 128\n255 64\n")
    np.testing.assert_array_equal(read_pgm(tmp_path / "ascii.pgm"), pixels / 255)
    _write(tmp_path / "c.jsonl", [{"id": "a", "image": {"pgm": "img.pgm"}, "report": "x"}])
    np.testing.assert_array_equal(load_corpus(tmp_path / "c.jsonl")[0].image, pixels / 255)


def test_split_partition(tiny_corpus):
    train, test = split(tiny_corpus, 0.25, seed=4)
    assert len(train) + len(test) == len(tiny_corpus)
    assert not {e.id for e in train} & {e.id for e in test}
    again = split(tiny_corpus, 0.25, seed=4)
    assert [e.id for e in again[1]] == [e.id for e in test]
    with pytest.raises(ValueError):
        split(tiny_corpus, 1.0, 0)
    with pytest.raises(ValueError):
        split(tiny_corpus[:2] + tiny_corpus[:1], 0.5, 0)
