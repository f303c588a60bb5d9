import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.base import clone

from rawflow.audio_io import WaveformBuffer
from rawflow.errors import DimensionError, PreconditionError
from rawflow.evalkit import (
    CentroidPosteriorClassifier,
    EmbeddingStats,
    MelStatsEmbedder,
    MetricReport,
    frechet_distance,
    gaussian_stats,
    inception_score,
    mel_filterbank,
    mel_stats_embedder,
    paired_kl,
)


def stats1d(mu, var):
    return EmbeddingStats(np.array([mu]), np.array([[var]]), 1)


def test_gaussian_stats_examples(rng):
    s = gaussian_stats(np.array([[1.0, 2.0]]))
    np.testing.assert_array_equal(s.cov, 0.0)
    s = gaussian_stats(np.array([[0.0, 0.0], [2.0, 0.0]]))
    np.testing.assert_array_equal(s.mean, [1.0, 0.0])
    np.testing.assert_array_equal(s.cov, np.diag([1.0, 0.0]))
    x = rng.standard_normal((30, 4))
    a, b = gaussian_stats(x), gaussian_stats(x[rng.permutation(30)])
    np.testing.assert_allclose(a.mean, b.mean)
    np.testing.assert_allclose(a.cov, b.cov)
    np.testing.assert_allclose(a.cov, a.cov.T, atol=1e-9)


def test_fd_examples(rng):
    x = rng.standard_normal((50, 6))
    s = gaussian_stats(x)
    assert frechet_distance(s, s) < 1e-6
    assert frechet_distance(stats1d(0, 1), stats1d(1, 4)) == pytest.approx(2.0, abs=1e-6)
    t = gaussian_stats(rng.standard_normal((50, 6)) * 2 + 1)
    assert frechet_distance(s, t) == pytest.approx(frechet_distance(t, s), abs=1e-6)


def test_fd_matches_scipy_sqrtm(rng):
    from scipy import linalg

    a = gaussian_stats(rng.standard_normal((40, 5)))
    b = gaussian_stats(rng.standard_normal((40, 5)) @ rng.standard_normal((5, 5)))
    covmean = linalg.sqrtm(a.cov @ b.cov).real
    ref = np.sum((a.mean - b.mean) ** 2) + np.trace(a.cov + b.cov - 2 * covmean)
    assert frechet_distance(a, b) == pytest.approx(ref, rel=1e-6)


def test_fd_nonnegative_and_dims(rng):
    for _ in range(20):
        s = gaussian_stats(rng.standard_normal((3, 8)))
        assert frechet_distance(s, s) >= -1e-6
    with pytest.raises(DimensionError):
        frechet_distance(stats1d(0, 1), gaussian_stats(np.zeros((2, 2))))


def test_fd_separates_shift():
    rng = np.random.default_rng(0)
    wins = 0
    for _ in range(100):
        a = gaussian_stats(rng.standard_normal((500, 8)))
        same = gaussian_stats(rng.standard_normal((500, 8)))
        shifted = gaussian_stats(rng.standard_normal((500, 8)) + 1.0)
        wins += frechet_distance(a, same) < frechet_distance(a, shifted)
    assert wins == 100


def test_kl_examples(rng):
    p = rng.dirichlet(np.ones(4), size=10)
    assert paired_kl(p, p) < 1e-9
    assert paired_kl(np.eye(4)[:1], np.full((1, 4), 0.25)) == pytest.approx(np.log(4))
    q = rng.dirichlet(np.ones(4), size=10)
    assert paired_kl(p, q) >= 0
    with pytest.raises(DimensionError):
        paired_kl(p, q[:5])
    with pytest.raises(PreconditionError):
        paired_kl(p * 2, q)


def test_is_examples(rng):
    assert inception_score(np.tile([0.2, 0.3, 0.5], (6, 1))) == pytest.approx(1.0)
    assert inception_score(np.tile(np.eye(4), (5, 1))) == pytest.approx(4.0, abs=1e-6)
    for _ in range(20):
        s = inception_score(rng.dirichlet(np.ones(4) * 0.3, size=12))
        assert 1 - 1e-9 <= s <= 4 + 1e-9


def test_mel_filterbank_shape_and_coverage():
    fb = mel_filterbank(16000, 512, 64)
    assert fb.shape == (64, 257)
    assert np.all(fb >= 0) and np.all(fb.max(axis=1) > 0)


def tone(f, n=8000, sr=16000):
    return WaveformBuffer(0.5 * np.sin(2 * np.pi * f * np.arange(n) / sr), sr)


def test_embedder_examples():
    e = mel_stats_embedder(tone(440))
    assert e.shape == (128,)
    assert e.tobytes() == mel_stats_embedder(tone(440)).tobytes()
    assert np.linalg.norm(e - mel_stats_embedder(tone(880))) > 0.1
    silent = mel_stats_embedder(WaveformBuffer(np.zeros(8000), 16000))
    np.testing.assert_allclose(silent[:64], np.log(1e-10))
    np.testing.assert_allclose(silent[64:], 0.0, atol=1e-12)


def test_embedder_length_check_and_params():
    emb = MelStatsEmbedder().fit(np.zeros((2, 4000)))
    with pytest.raises(DimensionError):
        emb.transform(np.zeros((1, 3000)))
    assert clone(emb).get_params()["n_mels"] == 64
    assert emb.transform(np.zeros((1, 4000))).shape == (1, 128)
    short = MelStatsEmbedder().fit(np.zeros((1, 256)))
    assert short.transform(np.ones((1, 256))).shape == (1, 128)


def test_centroid_classifier(rng):
    X = np.concatenate([rng.normal(0, 0.1, (20, 3)), rng.normal(3, 0.1, (20, 3))])
    y = np.array([0] * 20 + [1] * 20)
    clf = CentroidPosteriorClassifier().fit(X, y)
    p = clf.predict_proba(X)
    np.testing.assert_allclose(p.sum(axis=1), 1.0)
    assert (clf.predict(X) == y).all()
    assert clf.score(X, y) == 1.0


def test_metric_report_schema():
    r = MetricReport(1.5, 0.1, 2.0, "mel", "centroid", 10, 12)
    d = r.to_dict()
    assert set(d) == {"fd", "kl", "is", "embedder", "classifier", "n_generated", "n_reference"}
    assert '"is": 2.0' in r.to_json()


@given(st.integers(0, 2**31), st.integers(1, 6))
def test_fd_symmetric_and_nonnegative(seed, d):
    rng = np.random.default_rng(seed)
    a = gaussian_stats(rng.standard_normal((40, d)))
    b = gaussian_stats(rng.standard_normal((40, d)) * rng.uniform(0.5, 2) + rng.uniform(-1, 1))
    ab, ba = frechet_distance(a, b), frechet_distance(b, a)
    assert ab >= -1e-9
    assert ab == pytest.approx(ba, rel=1e-6, abs=1e-9)
    assert frechet_distance(a, a) == pytest.approx(0.0, abs=1e-8)
