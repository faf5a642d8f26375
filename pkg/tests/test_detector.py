from __future__ import annotations

import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from condattr import detector as det
from condattr import nn
from condattr.data import apply_normalization, fit_normalization, stack_windows, window_starts
from condattr.synth import InjectionSpec, LatentFactorSystem, generate, inject

ECHO = [sys.executable, "-m", "condattr.echo_worker"]


@pytest.fixture(scope="module")
def normal_windows():
    s = generate(LatentFactorSystem.random(4, 2, seed=1), 1200)
    z = apply_normalization(s, fit_normalization(s))
    return stack_windows(z, window_starts(1200, 8, 1), 8)


# -------------------------------------------------------------------- PCA

def test_full_basis_scores_zero(normal_windows):
    W = normal_windows[:40, :3, :2]  # w*d = 6 < n
    d = det.train_pca_detector(W, 6)
    assert np.max(d.score(W)) < 1e-20
    assert d.score(np.random.default_rng(0).standard_normal((3, 2))) < 1e-20


def test_rank_one_data(rng):
    base = rng.standard_normal((4, 3))
    W = rng.standard_normal(50)[:, None, None] * base + 2.0
    d = det.train_pca_detector(W, 1)
    assert np.max(d.score(W)) < 1e-10


def test_basis_matches_eigendecomposition(rng):
    X = rng.standard_normal((500, 2)) @ np.array([[2.0, 0.5], [0.0, 0.7]])
    d = det.train_pca_detector(X.reshape(500, 1, 2), 2)
    vals, vecs = np.linalg.eigh(np.cov(X.T, bias=True))
    vecs = vecs[:, ::-1].T
    for got, want in zip(d.basis, vecs):
        assert abs(abs(got @ want) - 1.0) < 1e-10


def test_pca_invariant_to_in_subspace_shift(normal_windows, rng):
    d = det.train_pca_detector(normal_windows, 5)
    W = rng.standard_normal((10, 8, 4))
    shift = (rng.standard_normal((10, 5)) @ d.basis).reshape(10, 8, 4)
    np.testing.assert_allclose(d.score(W + shift), d.score(W), rtol=1e-8, atol=1e-8)


def test_batch_equals_single_scores(normal_windows):
    d = det.train_pca_detector(normal_windows, 5)
    batch = d.score(normal_windows[:20])
    assert np.array_equal(batch, [d.score(w) for w in normal_windows[:20]])
    assert np.array_equal(batch, d.score(normal_windows[:20]))  # pure


def test_degenerate_pca_rejected(normal_windows):
    with pytest.raises(ValueError, match="degenerate"):
        det.train_pca_detector(normal_windows[:3], 5)
    d = det.train_pca_detector(normal_windows, 2)
    with pytest.raises(ValueError):
        d.score(np.zeros((9, 4)))


# --------------------------------------------------------------------- AE

def test_linear_identity_autoencoder(rng):
    X = rng.standard_normal((200, 3, 2))
    cfg = nn.TrainConfig(learning_rate=0.01, epochs=300, batch_size=32)
    d = det.train_ae_detector(X, hidden=(6,), activation="linear", config=cfg)
    assert np.max(d.score(X)) < 1e-8


def test_autoencoder_flags_injected_shift():
    clean = generate(LatentFactorSystem.random(4, 2, seed=1), 3000)
    stats = fit_normalization(clean, (0, 2000))
    z = apply_normalization(clean, stats)
    W = stack_windows(z, window_starts(2000, 10, 1), 10)
    cfg = nn.TrainConfig(learning_rate=3e-3, epochs=60, batch_size=64)
    d = det.train_ae_detector(W, hidden=(16, 4), config=cfg)
    out, _ = inject(clean, InjectionSpec("shift", 1, (2500, 2600)),
                    scale=clean.values[:2000].std(axis=0))
    anomalous = d.score(stack_windows(apply_normalization(out, stats), np.arange(2500, 2591), 10))
    normal = d.score(stack_windows(z, np.arange(2000, 2400), 10))
    assert np.all(anomalous > np.quantile(normal, 0.95))


def test_autoencoder_is_deterministic(normal_windows):
    cfg = nn.TrainConfig(epochs=3, seed=4)
    a = det.train_ae_detector(normal_windows[:100], (8, 3), config=cfg)
    b = det.train_ae_detector(normal_windows[:100], (8, 3), config=cfg)
    assert all(np.array_equal(p, q) for p, q in zip(a.net.params(), b.net.params()))


# -------------------------------------------------------- linear/function

def test_linear_detector_and_lipschitz(rng):
    A = rng.standard_normal((5, 3))
    d = det.LinearDetector(A, 1.5)
    W = rng.standard_normal((5, 3))
    assert d.score(W) == pytest.approx(float(np.sum(A * W)) + 1.5, abs=1e-12)
    assert d.lipschitz(2) == pytest.approx(np.linalg.norm(A[:, 2]))
    with pytest.raises(det.DetectorError):
        det.FunctionDetector(np.sum, 5, 3).lipschitz(0)


# --------------------------------------------------------------- external

def test_external_echo_matches_sum(rng):
    W = rng.standard_normal((7, 4, 3))
    with det.ExternalDetector(ECHO, 4, 3) as d:
        got = d.score(W)
        assert d.info["name"] == "echo-sum"
        np.testing.assert_allclose(got, W.reshape(7, -1).sum(axis=1), rtol=0, atol=1e-9)
        np.testing.assert_allclose(d.score(W), got, rtol=0, atol=1e-9)
        assert d.score(W[0]) == pytest.approx(W[0].sum(), abs=1e-9)


def test_external_failure_after_retries():
    d = det.ExternalDetector([sys.executable, "-c", "pass"], 2, 2)
    with pytest.raises(det.DetectorError, match="2 retries"):
        d.score(np.zeros((2, 2)))


def test_external_wrong_count_is_an_error(tmp_path):
    worker = tmp_path / "w.py"
    worker.write_text(
        "import json, sys\n"
        "for line in sys.stdin:\n"
        "    m = json.loads(line)\n"
        "    r = {'name': 'bad'} if m['type'] == 'hello' else {'scores': [0.0]}\n"
        "    print(json.dumps(r), flush=True)\n")
    d = det.ExternalDetector([sys.executable, str(worker)], 1, 1)
    with pytest.raises(det.DetectorError):
        d.score(np.zeros((3, 1, 1)))
    d.close()


def test_serve_in_process():
    import io
    import json
    inp = io.StringIO('{"type":"hello"}\n{"type":"score","w":1,"d":2,"windows":[[1,2],[3,4]]}\n'
                      '{"type":"nope"}\n')
    out = io.StringIO()
    det.serve(lambda X: X.sum(axis=1), "t", stdin=inp, stdout=out)
    replies = [json.loads(l) for l in out.getvalue().splitlines()]
    assert replies[0] == {"name": "t", "version": "1"}
    assert replies[1] == {"scores": [3.0, 7.0]}
    assert "error" in replies[2]


# ------------------------------------------------------------ persistence

def test_save_load_round_trip(tmp_path, normal_windows, rng):
    probes = rng.standard_normal((100, 8, 4))
    for d in (det.train_pca_detector(normal_windows, 4),
              det.train_ae_detector(normal_windows[:50], (6,), config=nn.TrainConfig(epochs=2)),
              det.LinearDetector(rng.standard_normal((8, 4)), 0.3)):
        p = tmp_path / "d.json"
        det.save_detector(d, p)
        back = det.load_detector(p)
        np.testing.assert_allclose(back.score(probes), d.score(probes), rtol=0, atol=1e-12)


def test_load_rejects_foreign_file(tmp_path):
    p = tmp_path / "x.json"
    p.write_text('{"format": "other"}')
    with pytest.raises(det.DetectorError):
        det.load_detector(p)


# ---------------------------------------------------- thresholds/metrics

def test_threshold_examples():
    assert det.choose_threshold(np.full(10, 3.25), 0.9) == 3.25
    assert det.choose_threshold(np.arange(1, 101), 0.95) == pytest.approx(95.05)


@given(arrays(float, st.integers(5, 200), elements=st.floats(-1e3, 1e3)),
       st.floats(0.5, 0.999))
def test_threshold_flag_count(scores, q):
    thr = det.choose_threshold(scores, q)
    assert np.sum(scores > thr) <= (1 - q) * scores.size + 1


def test_detection_metric_examples(rng):
    labels = np.array([0, 0, 1, 1, 0, 1], bool)
    m = det.detection_metrics(labels, labels, labels.astype(float))
    assert m["precision"] == m["recall"] == m["f1"] == 1.0
    assert m["roc_auc"] == 1.0
    n = 10_000
    lab = np.arange(n) % 2 == 0
    assert abs(det.roc_auc(rng.random(n), lab) - 0.5) < 0.02
    assert det.roc_auc([1, 1, 1, 1], [0, 1, 0, 1]) == 0.5
    assert det.roc_auc([1, 2], [1, 1]) is None


@given(arrays(bool, 30), arrays(bool, 30))
def test_f1_is_harmonic_mean(labels, flags):
    m = det.detection_metrics(labels, flags)
    p, r = m["precision"], m["recall"]
    hm = 2 * p * r / (p + r) if p + r else 0.0
    assert abs(m["f1"] - hm) <= 1e-12
