import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mosfuse import unsupervised as us
from mosfuse.errors import ModelFormatError

from . import oracles


# -- k-means -----------------------------------------------------------------

def test_exact_cover():
    X = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 5.0], [3.0, 3.0]])
    q = us.kmeans_fit(X, K=4, seed=0)
    assert q.inertia == 0.0
    assert sorted(map(tuple, q.centroids)) == sorted(map(tuple, X))


def test_two_blobs():
    rng = np.random.default_rng(0)
    sigma = 0.5
    a = rng.normal([0, 0, 0], sigma, (300, 3))
    b = rng.normal([10, -4, 2], sigma, (300, 3))
    q = us.kmeans_fit(np.vstack([a, b]), K=2, seed=1)
    for blob, mean in ((a, a.mean(0)), (b, b.mean(0))):
        d = np.linalg.norm(q.centroids - mean, axis=1).min()
        assert d < 3 * sigma
        labels = us.quantize(q, blob, dedup=False)
        purity = max(labels.count(0), labels.count(1)) / len(labels)
        assert purity >= 0.99


def test_kmeans_errors():
    with pytest.raises(ValueError, match="at least K"):
        us.kmeans_fit(np.zeros((3, 2)), K=4)
    with pytest.raises(ValueError):
        us.kmeans_fit(np.zeros((3, 2)), K=1)
    with pytest.raises(ValueError, match="distinct"):
        us.kmeans_fit(np.zeros((10, 2)), K=3)


def test_kmeans_deterministic():
    X = np.random.default_rng(4).normal(size=(500, 4))
    a, b = us.kmeans_fit(X, K=12, seed=9), us.kmeans_fit(X, K=12, seed=9)
    np.testing.assert_array_equal(a.centroids, b.centroids)
    assert us.quantize(a, X) == us.quantize(b, X)


def test_kmeans_lloyd_fixed_point():
    X = np.random.default_rng(5).normal(size=(400, 3))
    q = us.kmeans_fit(X, K=5, seed=0)
    labels = np.array(us.quantize(q, X, dedup=False))
    for j in range(q.K):
        np.testing.assert_allclose(q.centroids[j], X[labels == j].mean(0), atol=1e-6)


def test_quantize_examples():
    C = np.eye(8) * 10
    q = us.KMeansQuantizer(C)
    frames = C[[3, 3, 7]]
    assert us.quantize(q, frames) == [3, 7]
    assert us.quantize(q, frames, dedup=False) == [3, 3, 7]
    tie = (C[1] + C[4]) / 2
    assert us.quantize(q, tie[None, :]) == [1]
    with pytest.raises(ValueError, match="dimension"):
        us.quantize(q, np.zeros((2, 3)))


def test_quantizer_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    q = us.kmeans_fit(rng.normal(size=(200, 3)), K=6, seed=2)
    us.save_quantizer(q, tmp_path / "q.json")
    back = us.load_quantizer(tmp_path / "q.json")
    X = rng.normal(size=(100, 3))
    assert us.quantize(back, X, dedup=False) == us.quantize(q, X, dedup=False)
    np.testing.assert_array_equal(back.centroids, q.centroids)


# -- unit LM -----------------------------------------------------------------

def test_unigram_hand_count():
    K = 5
    lm = us.ulm_train([[0, 1]], order=1, K=K)
    for tok in (0, 1, K):
        assert lm.prob(tok, []) == (1 + 1) / (3 + K + 1)
    assert lm.prob(2, []) == 1 / (3 + K + 1)
    assert lm.prob(0, [4, 4, 4]) == lm.prob(0, [])


def test_empty_corpus():
    with pytest.raises(ValueError, match="empty corpus"):
        us.ulm_train([], K=3)


def test_uniform_and_certain_scores():
    K = 7
    uniform = us.NgramLM(2, K, ({}, {}))
    assert us.speechlm_score(uniform, [1, 5, 2]) == pytest.approx(-math.log(K + 1), abs=1e-15)
    certain = us.ulm_train([[0, 1]], order=2, K=K, lambdas=(0.0, 1.0))
    assert us.speechlm_score(certain, [0, 1]) == 0.0


def test_bigram_score_against_oracle():
    K = 3
    corpus = [[0, 1, 0, 1]]
    lm = us.ulm_train(corpus, order=2, K=K)
    counts = oracles.count_ngrams(corpus, 2, K)
    lam = (0.5, 0.5)
    expected = (math.log(oracles.interpolated_prob(counts, 2, K, lam, 0, []))
                + math.log(oracles.interpolated_prob(counts, 2, K, lam, 1, [0]))
                + math.log(oracles.interpolated_prob(counts, 2, K, lam, K, [0, 1]))) / 3
    assert us.speechlm_score(lm, [0, 1]) == pytest.approx(expected, abs=1e-15)
    # 5 unigram tokens over 4 events: p(0|bos) = .5*3/9 + .5, p(1|0) = .5*3/9 + .5, p(eos|1) = .5*2/9 + .5*1/2
    by_hand = (2 * math.log(2 / 3) + math.log(13 / 36)) / 3
    assert us.speechlm_score(lm, [0, 1]) == pytest.approx(by_hand, abs=1e-15)


@pytest.mark.parametrize("order", [1, 2])
def test_distributions_sum_to_one_exhaustively(order):
    rng = np.random.default_rng(order)
    K = 6
    corpus = [rng.integers(0, K, rng.integers(1, 9)).tolist() for _ in range(12)]
    lm = us.ulm_train(corpus, order=order, K=K)
    histories = [[]] + [[h] for h in range(K)]
    for h in histories:
        total = math.fsum(lm.prob(t, h) for t in range(K + 1))
        assert total == pytest.approx(1.0, abs=1e-9)
    ft = us.ulm_finetune(lm, corpus[:3], 0.3)
    for h in histories:
        assert math.fsum(ft.prob(t, h) for t in range(K + 1)) == pytest.approx(1.0, abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.lists(st.integers(0, 4), min_size=1, max_size=8), min_size=1, max_size=6),
       st.integers(1, 3), st.lists(st.integers(0, 4), max_size=4))
def test_lm_matches_oracle(corpus, order, history):
    K = 5
    lm = us.ulm_train(corpus, order=order, K=K)
    counts = oracles.count_ngrams(corpus, order, K)
    lam = [1 / order] * order
    for tok in range(K + 1):
        assert lm.prob(tok, history) == pytest.approx(
            oracles.interpolated_prob(counts, order, K, lam, tok, history), abs=1e-12)


def test_order_one_permutation_invariance_and_order_two_sensitivity():
    corpus = [[0, 1, 2, 0, 1, 2, 0, 1], [2, 1]]
    uni = us.ulm_train(corpus, order=1, K=4)
    bi = us.ulm_train(corpus, order=2, K=4)
    a, b = [0, 1, 2, 2], [2, 2, 1, 0]
    assert us.speechlm_score(uni, a) == pytest.approx(us.speechlm_score(uni, b), abs=1e-15)
    assert us.speechlm_score(bi, a) != us.speechlm_score(bi, b)


def test_finetune_endpoints():
    K = 4
    base = us.ulm_train([[0, 1, 2], [3, 2, 1]], order=2, K=K)
    domain = [[0, 3, 0, 3], [3, 0]]
    fresh = us.ulm_train(domain, order=2, K=K)
    full = us.ulm_finetune(base, domain, mix=1.0)
    tiny = us.ulm_finetune(base, domain, mix=1e-9)
    for h in ([], [0], [3], [1]):
        for t in range(K + 1):
            assert full.prob(t, h) == pytest.approx(fresh.prob(t, h), abs=1e-15)
            assert tiny.prob(t, h) == pytest.approx(base.prob(t, h), abs=1e-6)
    # 0 -> 3 never occurs in the base corpus
    assert us.ulm_finetune(base, domain).prob(3, [0]) > base.prob(3, [0])
    with pytest.raises(ValueError):
        us.ulm_finetune(base, domain, mix=0.0)


def test_out_of_range_units():
    lm = us.ulm_train([[0, 1]], order=2, K=2)
    with pytest.raises(ValueError, match="outside vocabulary"):
        us.speechlm_score(lm, [0, 2])
    with pytest.raises(ValueError, match="outside vocabulary"):
        us.ulm_train([[5]], K=2)


def test_mixture_rejects_mismatched_components():
    a = us.ulm_train([[0]], order=2, K=3)
    b = us.ulm_train([[0]], order=3, K=3)
    with pytest.raises(ValueError, match="share order and K"):
        us.MixtureLM(((0.5, a), (0.5, b)))


def test_lm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    K = 10
    seqs = [rng.integers(0, K, 12).tolist() for _ in range(20)]
    lm = us.ulm_finetune(us.ulm_train(seqs, 3, K), seqs[:5], 0.3)
    us.save_lm(lm, tmp_path / "lm.json")
    back = us.load_lm(tmp_path / "lm.json")
    for s in (rng.integers(0, K, rng.integers(1, 20)).tolist() for _ in range(100)):
        assert us.speechlm_score(back, s) == us.speechlm_score(lm, s)


def test_bad_lm_file(tmp_path):
    (tmp_path / "x.json").write_text('{"format_version": 1, "type": "rnn"}')
    with pytest.raises(ModelFormatError):
        us.load_lm(tmp_path / "x.json")


# -- confidence --------------------------------------------------------------

@pytest.mark.parametrize("lps,expected", [((0.0, 0.0), 0.0), ((-1.0, -1.0), -1.0), ((-0.5, -1.5, -1.0), -1.0)])
def test_confidence_examples(lps, expected):
    assert us.confidence_score(us.ConfidenceRecord("u", lps)) == expected


def test_confidence_record_validation():
    with pytest.raises(ValueError, match="empty"):
        us.ConfidenceRecord("u", ())
    with pytest.raises(ValueError, match="must be ≤ 0"):
        us.ConfidenceRecord("u", (0.1,))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-50, 0, allow_nan=False), min_size=1, max_size=30))
def test_confidence_bounds(lps):
    c = us.confidence_score(us.ConfidenceRecord("u", tuple(lps)))
    assert min(lps) <= c <= 0.0


def test_load_posteriors(tmp_path):
    p = tmp_path / "p.txt"
    p.write_text("u1 -0.2 -0.4\n\nu2 0\n")
    recs = us.load_posteriors(p)
    assert [(r.utterance_id, r.token_logprobs) for r in recs] == [("u1", (-0.2, -0.4)), ("u2", (0.0,))]


@pytest.mark.parametrize("text,match", [
    ("u1 -0.2 0.1\n", "line 1: log-probability must be ≤ 0"),
    ("u1 -0.2\nu1 -0.3\n", "line 2: duplicate utterance 'u1' \\(first on line 1\\)"),
    ("u1\n", "no log-probabilities"),
    ("u1 abc\n", "non-numeric"),
    ("u1 -inf\n", "non-finite"),
])
def test_posterior_errors(tmp_path, text, match):
    p = tmp_path / "p.txt"
    p.write_text(text)
    with pytest.raises(us.PosteriorFormatError, match=match):
        us.load_posteriors(p)
