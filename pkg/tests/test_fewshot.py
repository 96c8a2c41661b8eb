import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from holossl.fewshot import (
    LabelledEmbeddings,
    LinearHead,
    PrototypeHead,
    fit_linear,
    fit_prototypes,
    head_bytes,
    load_head,
    logistic_objective,
    predict,
    prototype_objective,
    sample_episode,
    save_head,
)


def labelled(n_taxa, per_taxon, dim=6, seed=0, spread=0.3):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(n_taxa, dim))
    vecs, taxa, ids = [], [], []
    for c in range(n_taxa):
        for i in range(per_taxon):
            vecs.append(centers[c] + spread * rng.normal(size=dim))
            taxa.append(f"t{c:02d}")
            ids.append(f"t{c:02d}/{i}")
    return LabelledEmbeddings(ids, np.array(vecs), taxa)


def nearest_centroid(support_x, support_y, query_x, n_taxa):
    """Brute force: normalise, average per taxon, renormalise, pick highest cosine."""
    def unit(v):
        return v / np.linalg.norm(v)

    cents = [unit(sum(unit(s) for s, y in zip(support_x, support_y) if y == c)) for c in range(n_taxa)]
    out = []
    for q in query_x:
        sims = [float(unit(q) @ c) for c in cents]
        out.append(max(range(n_taxa), key=lambda c: (sims[c], -c)))
    return np.array(out)


# -- episodes ------------------------------------------------------------------


def test_eleven_taxa_one_shot():
    ep = sample_episode(labelled(11, 4), k=1, seed=0)
    assert len(ep.support_ids) == 11
    assert sorted(ep.support_y) == list(range(11))


def test_k_equal_class_size_rejected():
    with pytest.raises(ValueError, match="insufficient query remainder"):
        sample_episode(labelled(3, 5), k=5, seed=0)


def test_episode_deterministic():
    data = labelled(4, 10)
    a, b = sample_episode(data, 3, seed=9), sample_episode(data, 3, seed=9)
    assert a.support_ids == b.support_ids and a.query_ids == b.query_ids


def test_stratification_and_disjointness_over_seeds():
    data = labelled(5, 12)
    for seed in range(1000):
        k = 1 + seed % 11
        ep = sample_episode(data, k, seed)
        assert np.bincount(ep.support_y, minlength=5).tolist() == [k] * 5
        assert not set(ep.support_ids) & set(ep.query_ids)
        assert len(ep.support_ids) + len(ep.query_ids) == len(data)
        assert set(ep.query_y) == set(range(5))


# -- linear head ---------------------------------------------------------------


def test_logistic_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(12, 5))
    t = (rng.integers(0, 3, size=12)[:, None] == np.arange(3)).astype(float)
    w, b = rng.normal(size=(5, 3)), rng.normal(size=3)
    _, gw, gb = logistic_objective(w, b, x, t, 0.1)
    eps = 1e-6
    num_w = np.zeros_like(w)
    for idx in np.ndindex(w.shape):
        wp, wm = w.copy(), w.copy()
        wp[idx] += eps
        wm[idx] -= eps
        num_w[idx] = (logistic_objective(wp, b, x, t, 0.1)[0].sum() - logistic_objective(wm, b, x, t, 0.1)[0].sum()) / (2 * eps)
    num_b = np.zeros_like(b)
    for i in range(3):
        bp, bm = b.copy(), b.copy()
        bp[i] += eps
        bm[i] -= eps
        num_b[i] = (logistic_objective(w, bp, x, t, 0.1)[0].sum() - logistic_objective(w, bm, x, t, 0.1)[0].sum()) / (2 * eps)
    assert np.abs(gw - num_w).max() / np.abs(num_w).max() < 1e-4
    assert np.abs(gb - num_b).max() / np.abs(num_b).max() < 1e-4


def test_antipodal_points_separated():
    x = np.array([[1.0, 0.0], [-1.0, 0.0]])
    head = fit_linear(x, np.array([0, 1]), ["a", "b"])
    labels, scores = predict(head, x)
    assert list(labels) == ["a", "b"]
    # exhaustive sign check: taxon a's classifier is positive exactly on the +x side
    assert scores[0, 0] > 0 > scores[1, 0]
    assert scores[1, 1] > 0 > scores[0, 1]


def test_zero_embeddings_use_bias_only():
    x = np.zeros((6, 4))
    head = fit_linear(x, np.array([0, 0, 1, 1, 2, 2]), ["a", "b", "c"])
    _, scores = predict(head, np.random.default_rng(0).normal(size=(5, 4)) * 0)
    assert (scores == scores[0]).all()
    assert np.abs(head.weights).max() == 0


def test_duplicated_support_same_predictions():
    data = labelled(3, 4, seed=4, spread=1.0)
    y = np.repeat(np.arange(3), 4)
    single = fit_linear(data.vectors, y, ["a", "b", "c"])
    double = fit_linear(np.repeat(data.vectors, 2, axis=0), np.repeat(y, 2), ["a", "b", "c"])
    probe = np.random.default_rng(1).normal(size=(200, 6))
    assert np.array_equal(predict(single, probe)[0], predict(double, probe)[0])


def test_logistic_objective_monotone():
    data = labelled(4, 5, seed=3, spread=1.5)
    trace = []
    fit_linear(data.vectors, np.repeat(np.arange(4), 5), list("abcd"), max_iter=200, trace=trace)
    objs = np.array(trace)
    assert len(objs) > 1
    assert (np.diff(objs, axis=0) <= 1e-15).all()


def test_linear_rejects_bad_input():
    with pytest.raises(ValueError):
        fit_linear(np.array([[np.nan, 0.0], [1.0, 0.0]]), np.array([0, 1]), ["a", "b"])
    with pytest.raises(ValueError):
        fit_linear(np.ones((2, 2)), np.array([0, 0]), ["a"])


# -- prototype head ------------------------------------------------------------


def test_one_shot_prototypes_equal_normalised_support():
    x = np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 2.0], [1.0, 1.0, 1.0]])
    head = fit_prototypes(x, np.arange(3), ["a", "b", "c"], epochs=0)
    np.testing.assert_allclose(head.prototypes, x / np.linalg.norm(x, axis=1, keepdims=True), atol=1e-15)


def test_identical_support_gives_ln_c():
    for c in (2, 3, 7):
        x = np.tile([[1.0, 2.0, 2.0]], (c, 1)) / 3.0
        loss, _ = prototype_objective(x.copy(), x, np.arange(c), 10.0)
        assert abs(loss - math.log(c)) < 1e-12


def test_zero_sum_support_rejected():
    x = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]])
    with pytest.raises(ValueError, match="sum to zero"):
        fit_prototypes(x, np.array([0, 0, 1]), ["a", "b"])


def test_prototype_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(10, 6))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    y = rng.integers(0, 4, size=10)
    p = rng.normal(size=(4, 6))
    _, grad = prototype_objective(p, x, y, 10.0)
    num = np.zeros_like(p)
    eps = 1e-6
    for idx in np.ndindex(p.shape):
        pp, pm = p.copy(), p.copy()
        pp[idx] += eps
        pm[idx] -= eps
        num[idx] = (prototype_objective(pp, x, y, 10.0)[0] - prototype_objective(pm, x, y, 10.0)[0]) / (2 * eps)
    assert np.abs(grad - num).max() / np.abs(num).max() < 1e-4


def test_orthogonal_clusters_match_nearest_centroid():
    rng = np.random.default_rng(0)
    a = np.array([1.0, 0, 0, 0]) + 0.1 * rng.normal(size=(20, 4))
    b = np.array([0, 1.0, 0, 0]) + 0.1 * rng.normal(size=(20, 4))
    data = LabelledEmbeddings([f"{i}" for i in range(40)], np.vstack([a, b]), ["a"] * 20 + ["b"] * 20)
    ep = sample_episode(data, 5, seed=1)
    head = fit_prototypes(ep.support_x, ep.support_y, ep.taxa)
    labels, _ = predict(head, ep.query_x)
    truth = np.array(ep.taxa)[ep.query_y]
    assert (labels == truth).all()
    oracle = np.array(ep.taxa)[nearest_centroid(ep.support_x, ep.support_y, ep.query_x, 2)]
    assert (labels == oracle).all()


def test_untrained_prototypes_equal_nearest_centroid():
    for seed in range(100):
        data = labelled(4, 8, seed=seed, spread=1.2)
        ep = sample_episode(data, 1 + seed % 5, seed)
        head = fit_prototypes(ep.support_x, ep.support_y, ep.taxa, scale=1 + seed % 7, epochs=0)
        labels, _ = predict(head, ep.query_x)
        oracle = np.array(ep.taxa)[nearest_centroid(ep.support_x, ep.support_y, ep.query_x, 4)]
        assert (labels == oracle).all()


def test_prototypes_stay_unit_norm_each_step():
    data = labelled(3, 6, seed=2, spread=1.0)
    y = np.repeat(np.arange(3), 6)
    for epochs in range(0, 12):
        head = fit_prototypes(data.vectors, y, ["a", "b", "c"], epochs=epochs, lr=0.5)
        assert np.abs(np.linalg.norm(head.prototypes, axis=1) - 1).max() < 1e-6


def test_prototype_training_reduces_loss():
    data = labelled(3, 6, seed=2, spread=1.5)
    trace = []
    fit_prototypes(data.vectors, np.repeat(np.arange(3), 6), ["a", "b", "c"], trace=trace)
    assert trace[-1] < trace[0]


# -- predict -------------------------------------------------------------------


def test_query_equal_to_prototype():
    p = np.eye(3)
    head = PrototypeHead(p, 10.0, ["a", "b", "c"])
    assert list(predict(head, p)[0]) == ["a", "b", "c"]


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), factor=st.floats(1e-3, 1e3))
def test_cosine_argmax_scale_invariant(seed, factor):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(4, 5))
    head = PrototypeHead(p / np.linalg.norm(p, axis=1, keepdims=True), 10.0, list("abcd"))
    q = rng.normal(size=(30, 5))
    assert np.array_equal(predict(head, q)[0], predict(head, q * factor)[0])
    assert np.array_equal(predict(head, q)[0], predict(head, q * 3)[0])


def test_ties_go_to_first_taxon():
    head = PrototypeHead(np.array([[1.0, 0.0], [0.0, 1.0]]), 10.0, ["first", "second"])
    assert predict(head, np.array([[1.0, 1.0]]))[0][0] == "first"
    lin = LinearHead(np.zeros((2, 2)), np.zeros(2), ["first", "second"])
    assert predict(lin, np.array([[3.0, -1.0]]))[0][0] == "first"


def test_dimension_mismatch():
    head = PrototypeHead(np.eye(3), 10.0, ["a", "b", "c"])
    with pytest.raises(ValueError):
        predict(head, np.ones((2, 4)))


@pytest.mark.parametrize("kind", ["linear", "prototype"])
def test_head_roundtrip(tmp_path, kind):
    data = labelled(3, 5)
    y = np.repeat(np.arange(3), 5)
    if kind == "linear":
        head = fit_linear(data.vectors, y, ["a", "b", "c"], normalize=True)
    else:
        head = fit_prototypes(data.vectors, y, ["a", "b", "c"], scale=7.5)
    save_head(head, tmp_path / "h.bin")
    raw = (tmp_path / "h.bin").read_bytes()
    assert raw.startswith(b"BHEAD1")
    back = load_head(tmp_path / "h.bin")
    assert type(back) is type(head) and back.taxa == head.taxa
    assert head_bytes(back) == raw
