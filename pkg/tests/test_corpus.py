import json

import numpy as np
import pytest

from mqma.corpus import (
    Document,
    QAItem,
    Token,
    attach_synthetic_qa,
    document_to_json,
    generate_corpus,
    load_documents,
    qa_template_words,
    save_documents,
)


def test_generation_is_deterministic(tmp_path):
    a, b = generate_corpus(7, 2), generate_corpus(7, 2)
    assert a == b
    save_documents(a, tmp_path / "a.jsonl")
    save_documents(b, tmp_path / "b.jsonl")
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    assert generate_corpus(8, 2) != a


def test_invariants_hold():
    for doc in generate_corpus(11, 30):
        doc.validate()
        assert 20 <= len(doc.tokens) <= 40
        assert doc.image.shape == (doc.page_height, doc.page_width)


def test_fixed_word_count():
    assert {len(d.tokens) for d in generate_corpus(1, 5, words_per_doc=(50, 50))} == {50}


def test_image_marks_token_boxes():
    doc = generate_corpus(2, 1)[0]
    x1, y1, x2, y2 = doc.tokens[0].box
    assert doc.image[y1:y2, x1:x2].max() < 0.5
    assert doc.image[0, 0] > 0.5


def test_errors():
    with pytest.raises(ValueError):
        generate_corpus(0, 1, vocab_words=[])
    with pytest.raises(ValueError):
        QAItem("", ("a",))
    with pytest.raises(ValueError):
        QAItem("q", ("",))


def test_round_trip(tmp_path):
    docs = attach_synthetic_qa(generate_corpus(4, 3), 0, per_doc=3, leak_groups=True)
    path = tmp_path / "c.jsonl"
    save_documents(docs, path)
    assert load_documents(path) == docs


def test_empty_file(tmp_path):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert load_documents(path) == []


def test_bad_box_names_document(tmp_path):
    obj = document_to_json(generate_corpus(5, 1)[0])
    obj["tokens"][0]["box"] = [10, 0, 5, 4]
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(obj) + "\n")
    with pytest.raises(ValueError, match="invalid box in doc"):
        load_documents(path)


def test_malformed_line_names_line(tmp_path):
    good = json.dumps(document_to_json(generate_corpus(5, 1)[0]))
    path = tmp_path / "bad.jsonl"
    path.write_text(good + "\n{not json\n")
    with pytest.raises(ValueError, match=r":2:"):
        load_documents(path)


def test_image_as_list_or_path(tmp_path):
    doc = generate_corpus(6, 1)[0]
    obj = document_to_json(doc)
    obj["image"] = doc.image.tolist()
    np.save(tmp_path / "img.npy", doc.image)
    obj2 = dict(obj, image="img.npy")
    path = tmp_path / "c.jsonl"
    path.write_text(json.dumps(obj) + "\n" + json.dumps(obj2) + "\n")
    a, b = load_documents(path)
    assert np.array_equal(a.image, doc.image) and np.array_equal(b.image, doc.image)


def test_synthetic_qa_answers_are_on_page():
    docs = attach_synthetic_qa(generate_corpus(9, 10), 3, per_doc=4, leak_groups=True)
    vocab_words = set(qa_template_words())
    for doc in docs:
        assert len(doc.qa_items) == 4
        for qa in doc.qa_items:
            assert qa.answers[0] in doc.words
            assert set(qa.question.split()) <= vocab_words
            assert qa.leak_group in ("page", "rows")
    blank = Document("e", 10, 10, [], np.ones((10, 10)))
    assert attach_synthetic_qa([blank], 0)[0].qa_items == []


def test_reading_order_violation():
    doc = Document("x", 50, 50, [Token("b", (20, 20, 25, 25)), Token("a", (0, 0, 5, 5))], np.ones((50, 50)))
    with pytest.raises(ValueError, match="reading order"):
        doc.validate()
