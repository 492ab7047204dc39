import pytest
from hypothesis import given, strategies as st

from mqma.tokenizer import BASE_SPECIALS, Vocab, build_vocab, detokenize, mask_token, tokenize

WORDS = ["thank", "you", "for", "inviting", "me", "to", "your", "party", "last", "week"]


@pytest.fixture(scope="module")
def small_vocab():
    return build_vocab([" ".join(WORDS)], 64)


def test_frequency_order_and_specials_prefix():
    v = build_vocab(["a b a"], 64)
    assert v.id_to_token[: len(BASE_SPECIALS)] == BASE_SPECIALS
    assert v.id_to_token[v.num_specials - 1] == mask_token(8)
    assert v.token_to_id["a"] < v.token_to_id["b"]


def test_ties_break_lexicographically():
    v = build_vocab(["zeta alpha mid"], 64)
    order = [t for t in v.id_to_token if not t.startswith("[")]
    assert order == ["alpha", "mid", "zeta"]


def test_build_is_deterministic():
    a = build_vocab(["x y z y", "q x"], 64)
    b = build_vocab(["x y z y", "q x"], 64)
    assert a.token_to_id == b.token_to_id


def test_build_errors():
    with pytest.raises(ValueError):
        build_vocab([], 64)
    with pytest.raises(ValueError):
        build_vocab(["a"], len(BASE_SPECIALS) + 8)


def test_required_words_come_first():
    v = build_vocab(["b b b a"], 64, required=["zz", "a"])
    assert v.id_to_token[v.num_specials : v.num_specials + 3] == ("zz", "a", "b")


def test_tokenize_examples(small_vocab):
    v = small_vocab
    assert tokenize("Thank you", v) == [v.token_to_id["thank"], v.token_to_id["you"]]
    assert tokenize("Thank you [MASK_1] me", v) == [
        v.token_to_id["thank"],
        v.token_to_id["you"],
        v.mask_id(1),
        v.token_to_id["me"],
    ]
    assert tokenize("zzzunknownzzz", v) == [v.unk_id]
    assert tokenize("[SEP] [mask_2]", v) == [v.sep_id, v.mask_id(2)]


def test_save_load_round_trip(tmp_path, small_vocab):
    path = tmp_path / "vocab.txt"
    small_vocab.save(path)
    assert Vocab.load(path) == small_vocab
    assert path.read_text(encoding="utf-8").splitlines()[3] == "[SEP]"


@given(st.lists(st.sampled_from(WORDS + [w.upper() for w in WORDS]), max_size=20), st.sampled_from([" ", "  ", "\t"]))
def test_detokenize_inverts_tokenize(words, sep):
    v = build_vocab([" ".join(WORDS)], 64)
    text = sep.join(words)
    assert detokenize(tokenize(text, v), v) == " ".join(text.lower().split())


@given(st.text(max_size=40))
def test_ids_stay_in_range(text):
    v = build_vocab([" ".join(WORDS)], 64)
    assert all(0 <= i < len(v) for i in tokenize(text, v))
