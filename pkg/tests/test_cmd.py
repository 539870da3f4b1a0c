import numpy as np
import pytest

from modetrain import toymodel
from modetrain.cmd import (
    assign_modes,
    block_structure_summary,
    cluster_modes,
    coefficient_change_fractions,
    correlation_matrix,
    decompose,
    fit_affine,
    instant_rd_loss,
    recursive_update,
    run_saturation_search,
    select_hyperparams,
    select_references,
    update_coefficients,
)
from modetrain.toymodel import ToyCodecConfig, generate_batch, init_params


def planted_trajectories(n_per_family=10, epochs=20, noise=1e-3, seed=0,
                         n_families=3):
    """Affine families against mutually orthogonal (zero-corr) base trajectories."""
    rng = np.random.default_rng(seed)
    base = rng.standard_normal((n_families, epochs))
    base -= base.mean(axis=1, keepdims=True)
    q, _ = np.linalg.qr(base.T)  # orthogonal, hence exactly uncorrelated
    base = q.T[:n_families]
    rows, truth = [], []
    for fam in range(n_families):
        for i in range(n_per_family):
            a = rng.uniform(0.5, 2.0) * (1 if rng.random() < 0.7 else -1)
            b = rng.uniform(-1.0, 1.0)
            rows.append(a * base[fam] + b + noise * rng.standard_normal(epochs))
            truth.append((fam, a, b))
    return np.array(rows), truth, base


# ---------------------------------------------------------------------------
# correlations
# ---------------------------------------------------------------------------


def test_corr_self_is_one():
    rows = np.array([[1.0, 2.0, 4.0], [0.0, 1.0, 0.5]])
    c = correlation_matrix(rows)
    np.testing.assert_allclose(np.diag(c), 1.0)


def test_corr_negation_has_unit_magnitude():
    row = np.array([0.3, -1.0, 2.5, 0.7])
    c = correlation_matrix(np.vstack([row, -row]))
    assert c[0, 1] == pytest.approx(1.0, abs=1e-12)


def test_corr_matches_hand_computed_pearson():
    c = correlation_matrix(np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 7.0]]))
    assert c[0, 1] == pytest.approx(0.9934, abs=1e-3)


def test_corr_zero_variance_rows():
    rows = np.array([[1.0, 1.0, 1.0], [0.0, 1.0, 2.0]])
    c = correlation_matrix(rows)
    assert c[0, 0] == 1.0
    assert c[0, 1] == 0.0


def test_corr_requires_two_epochs():
    with pytest.raises(ValueError):
        correlation_matrix(np.zeros((3, 1)))


def test_corr_symmetric_unit_interval():
    rng = np.random.default_rng(8)
    c = correlation_matrix(rng.standard_normal((40, 12)))
    np.testing.assert_array_equal(c, c.T)
    assert c.min() >= 0.0 and c.max() <= 1.0
    np.testing.assert_allclose(np.diag(c), 1.0)


# ---------------------------------------------------------------------------
# clustering and references
# ---------------------------------------------------------------------------


def test_cluster_recovers_duplicate_groups():
    rng = np.random.default_rng(1)
    a = rng.standard_normal(10)
    b = rng.standard_normal(10)
    rows = np.vstack([a, a, b, a, b, b])
    labels = cluster_modes(correlation_matrix(rows), 2)
    assert labels[0] == labels[1] == labels[3]
    assert labels[2] == labels[4] == labels[5]
    assert labels[0] != labels[2]


def test_cluster_m_equals_s_is_identity_partition():
    rng = np.random.default_rng(2)
    rows = rng.standard_normal((6, 8))
    labels = cluster_modes(correlation_matrix(rows), 6)
    assert sorted(labels.tolist()) == list(range(6))


def test_cluster_rejects_too_many_modes():
    with pytest.raises(ValueError):
        cluster_modes(np.eye(3), 4)


def test_cluster_recovers_planted_families():
    rows, truth, _ = planted_trajectories(seed=3)
    labels = cluster_modes(correlation_matrix(rows), 3)
    fam = np.array([t[0] for t in truth])
    # partitions must match up to relabeling
    for f in range(3):
        got = labels[fam == f]
        assert len(set(got.tolist())) == 1
    assert len(set(labels.tolist())) == 3


def test_select_references_singleton():
    c = np.array([[1.0]])
    refs = select_references(c, np.array([0]))
    assert refs.tolist() == [0]


def test_select_references_argmax_mean_correlation():
    # member 0 correlates {0.9, 0.8}; the others have lower means
    c = np.array([
        [1.0, 0.9, 0.8],
        [0.9, 1.0, 0.2],
        [0.8, 0.2, 1.0],
    ])
    refs = select_references(c, np.array([0, 0, 0]))
    assert refs.tolist() == [0]


def test_select_references_rejects_empty_mode():
    with pytest.raises(ValueError, match="empty"):
        select_references(np.eye(2), np.array([0, 2]))


def test_reference_belongs_to_its_planted_family():
    rows, truth, _ = planted_trajectories(seed=4)
    c = correlation_matrix(rows)
    labels = cluster_modes(c, 3)
    refs = select_references(c, labels)
    fam = np.array([t[0] for t in truth])
    for m, r in enumerate(refs):
        members = np.flatnonzero(labels == m)
        assert fam[r] == fam[members[0]]


# ---------------------------------------------------------------------------
# mode assignment
# ---------------------------------------------------------------------------


def test_assign_proportional_trajectory():
    rng = np.random.default_rng(5)
    refs = rng.standard_normal((3, 12))
    rows = np.vstack([refs, 2.5 * refs[2] + 1.0])
    labels, zero = assign_modes(rows, refs)
    assert labels[3] == 2
    assert not zero[3]


def test_assign_constant_trajectory_goes_to_mode_zero_flagged():
    rng = np.random.default_rng(6)
    refs = rng.standard_normal((3, 12))
    rows = np.vstack([refs, np.full(12, 3.3)])
    labels, zero = assign_modes(rows, refs)
    assert labels[3] == 0
    assert zero[3]


def test_assign_planted_families_high_accuracy():
    rows, truth, _ = planted_trajectories(n_per_family=60, seed=7)
    c_s = correlation_matrix(rows)
    labels_s = cluster_modes(c_s, 3)
    refs = select_references(c_s, labels_s)
    labels, _ = assign_modes(rows, rows[refs], np.arange(rows.shape[0]), labels_s)
    fam = np.array([t[0] for t in truth])
    # map each cluster to its majority family and count agreement
    correct = 0
    for m in range(3):
        members = np.flatnonzero(labels == m)
        maj = np.bincount(fam[members]).argmax()
        correct += int((fam[members] == maj).sum())
    assert correct / rows.shape[0] >= 0.99


# ---------------------------------------------------------------------------
# affine fits
# ---------------------------------------------------------------------------


def test_fit_affine_exact_recovery():
    rng = np.random.default_rng(9)
    ref = rng.standard_normal(15)
    coef, _ = fit_affine((3.0 * ref - 2.0).reshape(1, -1), ref)
    assert coef[0, 0] == pytest.approx(3.0, abs=1e-8)
    assert coef[0, 1] == pytest.approx(-2.0, abs=1e-8)


def test_fit_affine_identity():
    rng = np.random.default_rng(10)
    ref = rng.standard_normal(15)
    coef, _ = fit_affine(ref.reshape(1, -1), ref)
    np.testing.assert_allclose(coef[0], [1.0, 0.0], atol=1e-9)


def test_fit_affine_matches_independent_normal_equations():
    rng = np.random.default_rng(11)
    ref = rng.standard_normal(25)
    rows = rng.standard_normal((30, 25))
    coef, _ = fit_affine(rows, ref)
    design = np.column_stack([ref, np.ones(25)])
    expected, *_ = np.linalg.lstsq(design, rows.T, rcond=None)
    np.testing.assert_allclose(coef, expected.T, atol=1e-9)


def test_fit_affine_constant_member_gets_zero_slope():
    rng = np.random.default_rng(12)
    ref = rng.standard_normal(20)
    coef, _ = fit_affine(np.full((1, 20), 0.7), ref)
    assert coef[0, 0] == pytest.approx(0.0, abs=1e-8)
    assert coef[0, 1] == pytest.approx(0.7, abs=1e-8)


def test_fit_affine_needs_two_epochs():
    with pytest.raises(ValueError):
        fit_affine(np.ones((2, 1)), np.ones(1))


# ---------------------------------------------------------------------------
# recursive updates
# ---------------------------------------------------------------------------


def test_recursive_update_consistent_column_is_noop():
    rng = np.random.default_rng(13)
    ref = rng.standard_normal(12)
    k_true, d_true = 1.7, -0.4
    rows = (k_true * ref + d_true).reshape(1, -1)
    coef, gram = fit_affine(rows, ref)
    new_ref = 0.31
    coef2, _ = recursive_update(coef, gram, np.array([k_true * new_ref + d_true]),
                                new_ref)
    np.testing.assert_allclose(coef2, coef, atol=1e-10)


def test_recursive_matches_batch_fit_over_50_epochs():
    rng = np.random.default_rng(14)
    total, start, n_m = 50, 10, 40
    ref = rng.standard_normal(total)
    rows = rng.standard_normal((n_m, total))
    coef, gram = fit_affine(rows[:, :start], ref[:start])
    worst = 0.0
    for t in range(start, total):
        coef, gram = recursive_update(coef, gram, rows[:, t], ref[t])
        batch, _ = fit_affine(rows[:, : t + 1], ref[: t + 1])
        rel = np.abs(coef - batch) / np.maximum(np.abs(batch), 1e-12)
        worst = max(worst, float(rel.max()))
    assert worst <= 1e-6


def test_recursive_scalar_identity_mode():
    ref = np.array([0.1, 0.5, -0.3, 0.8])
    coef, gram = fit_affine(ref.reshape(1, -1), ref)
    for v in (0.2, -0.9, 1.5):
        coef, gram = recursive_update(coef, gram, np.array([v]), v)
    np.testing.assert_allclose(coef[0], [1.0, 0.0], atol=1e-8)


def test_recursive_rejects_nonfinite():
    coef = np.array([[1.0, 0.0]])
    gram = np.eye(2)
    with pytest.raises(FloatingPointError):
        recursive_update(coef, gram, np.array([np.nan]), 1.0)


# ---------------------------------------------------------------------------
# instant loss and the mode-count search
# ---------------------------------------------------------------------------

TINY = ToyCodecConfig(input_dim=6, hidden_dim=4, latent_dim=3, hyper_dim=2,
                      rd_lambda=0.01, distortion_scale=100.0)


def _tiny_trained(seed=0, epochs=8):
    from modetrain.trainer import TrainConfig, train

    cfg = TrainConfig(epochs=epochs, steps_per_epoch=10, seed=seed)
    metrics, params = train(TINY, cfg)
    return params


def test_instant_loss_identity_when_every_param_is_its_own_mode():
    params = _tiny_trained()
    n = params.n
    rng = np.random.default_rng(15)
    rows = rng.standard_normal((n, 6)) + params.values[:, None]
    decomp = decompose(rows, n, n, seed=3)
    samples = generate_batch(8, 6, seed=4)
    reconstructed = instant_rd_loss(decomp, params, TINY, samples)
    direct = toymodel.forward_loss(params, TINY, samples, quant="round").total
    assert reconstructed == direct


def test_instant_loss_planted_affine_structure_is_lossless():
    params = _tiny_trained()
    n = params.n
    rng = np.random.default_rng(16)
    epochs = 10
    base = rng.standard_normal((3, epochs))
    rows = np.empty((n, epochs))
    for i in range(n):
        fam = i % 3
        a = rng.uniform(0.5, 1.5)
        rows[i] = a * base[fam]
        rows[i] += params.values[i] - rows[i, -1]  # pin the final column
    decomp = decompose(rows, 3, min(n, 600), seed=5)
    samples = generate_batch(8, 6, seed=6)
    reconstructed = instant_rd_loss(decomp, params, TINY, samples)
    direct = toymodel.forward_loss(params, TINY, samples, quant="round").total
    assert abs(reconstructed - direct) <= 1e-6


def test_instant_loss_single_mode_on_uncorrelated_trajectories_is_worse():
    params = _tiny_trained(epochs=12)
    n = params.n
    rng = np.random.default_rng(17)
    rows = rng.standard_normal((n, 10))
    rows[:, -1] = params.values
    decomp = decompose(rows, 1, n, seed=7)
    samples = generate_batch(8, 6, seed=8)
    reconstructed = instant_rd_loss(decomp, params, TINY, samples)
    direct = toymodel.forward_loss(params, TINY, samples, quant="round").total
    assert reconstructed >= direct


def test_saturation_search_threshold_arithmetic():
    losses = {1: 0.50, 2: 0.40, 3: 0.3996, 4: 0.1}
    idx, evaluated, reason = run_saturation_search(
        [1, 2, 3, 4], lambda m: (losses[m], None))
    assert idx == 2  # the third candidate triggers the 0.1% stop and is kept
    assert reason == "saturated"
    assert len(evaluated) == 3


def test_saturation_search_single_candidate_exhausts():
    idx, evaluated, reason = run_saturation_search([5], lambda m: (1.0, None))
    assert idx == 0
    assert reason == "exhausted"


def test_saturation_search_plateau_from_start_stops_at_second():
    idx, evaluated, reason = run_saturation_search(
        [1, 2, 3], lambda m: (0.5, None))
    assert idx == 1
    assert reason == "saturated"


def test_saturation_search_requires_ascending_candidates():
    with pytest.raises(ValueError):
        run_saturation_search([3, 2], lambda m: (1.0, None))
    with pytest.raises(ValueError):
        run_saturation_search([], lambda m: (1.0, None))


def test_select_hyperparams_end_to_end_sets_s_factor():
    params = _tiny_trained()
    n = params.n
    rng = np.random.default_rng(18)
    rows = rng.standard_normal((n, 8)) * 0.01 + params.values[:, None]
    samples = generate_batch(8, 6, seed=9)
    result = select_hyperparams([2, 3], rows, params, TINY, samples, seed=1,
                                sample_factor=50)
    assert result.chosen_s == 50 * result.chosen_m
    assert result.decomposition is not None
    assert len(result.candidate_losses) == len(result.candidate_m)


def test_select_hyperparams_rejects_infeasible_sample_count():
    params = _tiny_trained()
    rows = np.random.default_rng(19).standard_normal((params.n, 6))
    samples = generate_batch(4, 6, seed=10)
    with pytest.raises(ValueError):
        select_hyperparams([2], rows, params, TINY, samples, seed=0,
                           sample_factor=params.n)


# ---------------------------------------------------------------------------
# decomposition bookkeeping and diagnostics
# ---------------------------------------------------------------------------


def test_decomposition_invariants_on_planted_data():
    rows, truth, _ = planted_trajectories(n_per_family=40, seed=20)
    decomp = decompose(rows, 3, 60, seed=21)
    # references carry (1, 0) and belong to their own mode
    for m, r in enumerate(decomp.ref_index):
        assert decomp.mode_of[r] == m
        assert decomp.coef_k[r] == 1.0
        assert decomp.coef_d[r] == 0.0
    for g in decomp.gram:
        np.testing.assert_allclose(g, g.T)
        assert np.all(np.linalg.eigvalsh(g) >= 0)
    recon = decomp.reconstruct(rows[:, -1])
    assert np.all(np.isfinite(recon))


def test_planted_coefficients_recovered_against_selected_reference():
    rows, truth, _ = planted_trajectories(n_per_family=40, noise=1e-3, seed=22)
    decomp = decompose(rows, 3, 60, seed=23)
    fam = np.array([t[0] for t in truth])
    a = np.array([t[1] for t in truth])
    b = np.array([t[2] for t in truth])
    for i in range(rows.shape[0]):
        r = decomp.ref_index[decomp.mode_of[i]]
        if fam[r] != fam[i]:
            continue  # tiny planted noise can misassign a stray member
        k_true = a[i] / a[r]
        d_true = b[i] - k_true * b[r]
        assert abs(decomp.coef_k[i] - k_true) <= 1e-2
        assert abs(decomp.coef_d[i] - d_true) <= 1e-2


def test_update_coefficients_respects_frozen_rows():
    rows, _, _ = planted_trajectories(n_per_family=10, seed=24)
    decomp = decompose(rows, 3, 30, seed=25)
    target = next(i for i in range(rows.shape[0]) if i not in set(decomp.ref_index))
    frozen = np.zeros(rows.shape[0], dtype=bool)
    frozen[target] = True
    k_before, d_before = decomp.coef_k[target], decomp.coef_d[target]
    values = rows[:, -1] + 0.05 * np.random.default_rng(26).standard_normal(rows.shape[0])
    update_coefficients(decomp, values, frozen=frozen)
    assert decomp.coef_k[target] == k_before
    assert decomp.coef_d[target] == d_before
    assert decomp.ref_history.shape[1] == rows.shape[1] + 1


def test_block_structure_diagnostic_on_planted_data():
    rows, _, _ = planted_trajectories(n_per_family=30, seed=27)
    decomp = decompose(rows, 3, 90, seed=28)
    within, cross = block_structure_summary(decomp)
    assert within > cross


def test_reconstruction_residual_stays_small_as_window_grows():
    epochs = 30
    rows, _, _ = planted_trajectories(n_per_family=20, epochs=epochs,
                                      noise=1e-3, seed=30)
    for window in (10, 20, 30):
        decomp = decompose(rows[:, :window], 3, 60, seed=31)
        recon = decomp.coef_k[:, None] * rows[decomp.ref_index[decomp.mode_of], :window] \
            + decomp.coef_d[:, None]
        residual = float(np.linalg.norm(rows[:, :window] - recon))
        assert residual <= 1e-1


def test_coefficient_change_fractions_buckets():
    final = np.array([1.0, 1.0, 1.0, 1.0])
    snaps = {10: np.array([1.005, 1.015, 1.03, 1.6]),
             20: np.array([1.001, 1.002, 1.004, 1.009])}
    fr = coefficient_change_fractions(snaps, final)
    assert fr[10] == [0.25, 0.25, 0.25, 0.0, 0.0, 0.0, 0.25]
    assert fr[20] == [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]
