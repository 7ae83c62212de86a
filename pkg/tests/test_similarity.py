import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hgc import similarity as sim
from hgc.dataio import SyntheticSpec, generate_synthetic


def _model(d=6, seed=0):
    rng = np.random.default_rng(seed)
    seqs = [generate_synthetic(SyntheticSpec(4, d, 120, 0.2, 1.0, seed=s))[0] for s in range(5)]
    x = np.concatenate([s.embeddings for s in seqs]) @ rng.standard_normal((d, d))
    labels = [f"{i}/{lab}" for i, s in enumerate(seqs) for lab in s.labels]
    return sim.fit_plda(x, labels)


def test_score_matrix_validation():
    with pytest.raises(ValueError):
        sim.ScoreMatrix(np.array([[0.0, 1.0], [0.0, 0.0]]), "raw")
    with pytest.raises(ValueError):
        sim.ScoreMatrix(np.array([[0.0, 2.0], [2.0, 0.0]]), "unit-interval")


def test_preprocess_unit_norm_before_pca():
    model = _model()
    x = np.random.default_rng(1).standard_normal((40, 6))
    z = sim._whiten_normalize(x, model)
    assert np.allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-9)
    pre = sim.preprocess(x, model)
    assert pre.dim == min(30, 39, 6) and not pre.pca_skipped


def test_preprocess_single_vector_skips_pca():
    model = _model()
    x = np.random.default_rng(2).standard_normal((1, 6))
    pre = sim.preprocess(x, model)
    assert pre.pca_skipped
    assert np.allclose(pre.vectors, sim._whiten_normalize(x, model))


def test_pca_matches_covariance_eigendecomposition():
    x = np.random.default_rng(3).standard_normal((50, 5)) * np.array([5, 4, 3, 2, 1])
    basis, center = sim.recording_pca(x, 3)
    cov = (x - x.mean(0)).T @ (x - x.mean(0)) / len(x)
    vals, vecs = np.linalg.eigh(cov)
    ref = vecs[:, ::-1][:, :3]
    for j in range(3):
        assert abs(abs(basis[:, j] @ ref[:, j]) - 1.0) < 1e-9
    assert np.allclose(basis.T @ basis, np.eye(3), atol=1e-12)


def test_pca_dimension_guards():
    assert sim.pca_dimension(100, 512) == 30
    assert sim.pca_dimension(10, 512) == 9
    assert sim.pca_dimension(100, 8) == 8


def _brute_llr(a, b, bvar, wvar):
    """Two-covariance LLR via explicit joint Gaussian densities."""
    d = len(a)
    t = bvar + wvar
    same = np.block([[np.diag(t), np.diag(bvar)], [np.diag(bvar), np.diag(t)]])
    diff = np.block([[np.diag(t), np.zeros((d, d))], [np.zeros((d, d)), np.diag(t)]])
    v = np.concatenate([a, b])

    def logpdf(c):
        sign, logdet = np.linalg.slogdet(c)
        return -0.5 * (logdet + v @ np.linalg.solve(c, v))
    return logpdf(same) - logpdf(diff)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_plda_llr_matches_joint_gaussian(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 6))
    rec = sim.RecordingPlda(np.eye(d), np.eye(d), rng.uniform(0.1, 3, d), rng.uniform(0.1, 3, d))
    a, b = rng.standard_normal(d), rng.standard_normal(d)
    assert sim.score_plda(a, b, rec) == pytest.approx(_brute_llr(a, b, rec.between_var, rec.within_var), abs=1e-9)
    assert sim.score_plda(a, b, rec) == sim.score_plda(b, a, rec)


def test_plda_self_beats_orthogonal():
    rng = np.random.default_rng(4)
    rec = sim.RecordingPlda.isotropic(5, 2.0, 1.0)
    for _ in range(100):
        a = rng.standard_normal(5)
        c = rng.standard_normal(5)
        c -= (c @ a) / (a @ a) * a
        assert sim.score_plda(a, a, rec) >= sim.score_plda(a, c, rec)


def test_plda_monotone_in_inner_product_isotropic():
    rec = sim.RecordingPlda.isotropic(3, 1.5, 0.5)
    a = np.array([1.0, 0.0, 0.0])
    angles = np.linspace(0, np.pi, 20)
    scores = [sim.score_plda(a, np.array([np.cos(t), np.sin(t), 0.0]), rec) for t in angles]
    assert all(x > y for x, y in zip(scores, scores[1:]))


def test_plda_between_to_zero_is_constant():
    rec = sim.RecordingPlda.isotropic(4, 1e-12, 1.0)
    rng = np.random.default_rng(5)
    vals = [sim.score_plda(rng.standard_normal(4), rng.standard_normal(4), rec) for _ in range(20)]
    assert np.ptp(vals) < 1e-9


def test_plda_matrix_matches_pairwise_and_rotation_invariance():
    rng = np.random.default_rng(6)
    rec = sim.RecordingPlda.isotropic(4, 2.0, 0.5)
    y = rng.standard_normal((7, 4))
    m = sim.plda_matrix(y, rec)
    for i in range(7):
        for j in range(7):
            assert m[i, j] == pytest.approx(sim.score_plda(y[i], y[j], rec), abs=1e-10)
    q, _ = np.linalg.qr(rng.standard_normal((4, 4)))
    assert np.allclose(sim.plda_matrix(y @ q.T, rec), m, atol=1e-10)


def test_fit_plda_separates_speakers():
    seq, _ = generate_synthetic(SyntheticSpec(4, 6, 200, 0.05, 1.0, seed=9))
    model = _model()
    fitted = sim.PldaScorer(model).fit(seq.embeddings)
    raw = fitted.raw(seq.embeddings)
    lab = np.array(seq.labels)
    same = lab[:, None] == lab[None, :]
    np.fill_diagonal(same, False)
    off = ~same & ~np.eye(len(lab), dtype=bool)
    assert raw[same].min() > raw[off].max()


def test_plda_model_round_trip(tmp_path):
    model = _model()
    model.save(tmp_path / "p.npz")
    back = sim.PldaModel.load(tmp_path / "p.npz")
    for f in ("mean", "whitener", "within_cov", "between_cov"):
        assert np.array_equal(getattr(model, f), getattr(back, f))
    arrays = model.to_arrays("x.")
    arrays["x.whitener"] = arrays["x.whitener"][:2]
    with pytest.raises(ValueError):
        sim.PldaModel.from_arrays(arrays, "x.")


def test_cosine_cases():
    a = np.array([1.0, 2.0, 0.0])
    assert sim.score_cosine(a, a) == pytest.approx(1.0)
    assert sim.score_cosine(a, np.array([-2.0, 1.0, 5.0])) == pytest.approx(0.0)
    assert sim.score_cosine(a, -a) == pytest.approx(-1.0)
    with pytest.raises(ValueError):
        sim.score_cosine(a, np.zeros(3))


def test_sigmoid_transform_values():
    s = sim.sigmoid_transform(np.array([[0.0, 1.0], [1.0, 0.0]]), 0.1)
    assert s.values[0, 0] == 0.5
    assert s.values[0, 1] == pytest.approx(1.0 / (1.0 + np.exp(-10.0)), abs=1e-12)
    assert s.values[0, 1] == pytest.approx(0.9999546, abs=1e-7)
    big = sim.sigmoid_transform(np.array([[-1e4, 1e4], [1e4, -1e4]]), 0.1).values
    assert np.all(np.isfinite(big)) and big[0, 1] == 1.0
    with pytest.raises(ValueError):
        sim.sigmoid_transform(np.zeros((2, 2)), 0.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_sigmoid_order_preserving(seed):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal((6, 6))
    s = s + s.T
    u = sim.sigmoid_transform(s, 0.7).values
    i, j = np.triu_indices(6, 1)
    order = np.argsort(s[i, j])
    assert np.all(np.diff(u[i, j][order]) >= 0)


def test_knn_examples():
    s = np.array([[0, 0.9, 0.2], [0.9, 0, 0.1], [0.2, 0.1, 0]])
    e = sim.knn_edges(s, 1)
    assert list(e.neighbors(0)) == [1]
    full = sim.knn_edges(s, 5)
    assert all(sorted(full.neighbors(i)) == [j for j in range(3) if j != i] for i in range(3))
    ties = np.array([[0, 0.5, 0.5], [0.5, 0, 0.5], [0.5, 0.5, 0]])
    assert list(sim.knn_edges(ties, 1).neighbors(0)) == [1]
    assert len(sim.knn_edges(np.zeros((1, 1)), 3)) == 0


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 15), st.integers(1, 20), st.integers(0, 10_000))
def test_knn_out_degree_and_rank_invariance(n, k, seed):
    rng = np.random.default_rng(seed)
    s = rng.standard_normal((n, n))
    s = s + s.T
    e = sim.knn_edges(s, k)
    assert np.all(e.out_degree() == min(k, n - 1))
    u = sim.sigmoid_transform(s, 1.0)
    assert np.array_equal(sim.knn_edges(u, k).dst, e.dst)
    for i in range(n):
        nb = e.neighbors(i)
        rest = np.setdiff1d(np.arange(n), np.concatenate([nb, [i]]))
        if len(rest):
            assert s[i, nb].min() >= s[i, rest].max()


def test_knn_allowed_mask():
    s = np.array([[0, 0.9, 0.2], [0.9, 0, 0.1], [0.2, 0.1, 0]])
    allowed = np.array([[1, 0, 1], [1, 1, 1], [1, 1, 1]], dtype=bool)
    assert list(sim.knn_edges(s, 1, allowed).neighbors(0)) == [2]
