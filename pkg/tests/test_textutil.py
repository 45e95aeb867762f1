import numpy as np

from kbagent.textutil import FEATURE_DIM, bucket, featurize, fnv1a_64, l2_normalize, tokenize


def test_tokenize_lowercases_and_splits_on_nonalnum():
    assert tokenize("Open the Door-3, now!") == ["open", "the", "door", "3", "now"]
    assert tokenize("") == []
    assert tokenize("...!!!") == []


def test_tokenize_is_deterministic():
    text = "Take the pot; put it on the stove."
    assert tokenize(text) == tokenize(text)


def test_fnv1a_reference_vectors():
    # published FNV-1a 64-bit vectors
    assert fnv1a_64("") == 14695981039346656037
    assert fnv1a_64("a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64("foobar") == 0x85944171F73967E8


def test_featurize_case_fold_collapse():
    vec = featurize("Pot pot POT")
    assert len(vec) == 1
    assert list(vec.values()) == [3.0]


def test_featurize_empty():
    assert featurize("") == {}


def test_featurize_matches_hand_rolled_oracle():
    text = "the quick brown fox jumps over the lazy dog the end"
    expected: dict[int, float] = {}
    for token in text.lower().split():
        b = fnv1a_64(token) % FEATURE_DIM
        expected[b] = expected.get(b, 0.0) + 1.0
    assert featurize(text) == expected


def test_bucket_range():
    rng = np.random.default_rng(7)
    for _ in range(200):
        token = "".join(chr(97 + int(c)) for c in rng.integers(0, 26, size=6))
        assert 0 <= bucket(token) < FEATURE_DIM


def test_l2_normalize():
    vec = l2_normalize({1: 3.0, 2: 4.0})
    assert abs(sum(v * v for v in vec.values()) - 1.0) < 1e-12
    assert l2_normalize({}) == {}
