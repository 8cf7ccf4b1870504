"""Layer-insertion tests: the four algorithms, pruning exactness,
preservation metrics, folding, and determinism."""

import dataclasses
import importlib

import numpy as np
import pytest

morph_mod = importlib.import_module("morphkit.morph")
from morphkit.errors import EmptyLayerError, MorphkitError, ShapeError
from morphkit.linalg import standardize_columns, vectorize
from morphkit.morph import (
    MorphReport,
    MorphSpec,
    contribution_matrices,
    fold_beta,
    morph,
    morph_alg1,
    morph_alg2,
    morph_alg3,
    morph_baseline,
    preservation_error,
    sample_rows,
)
from morphkit.network import Layer, Mlp, apply_activation, forward, init_weights
from morphkit.sparse import SparseConfig, iilasso_diag, refit_w1, similarity_matrix


def random_parent(seed, widths=(6, 5, 3), hidden="relu", bias=True):
    rng = np.random.default_rng(seed)
    layers = []
    for k in range(len(widths) - 1):
        act = hidden if k < len(widths) - 2 else "identity"
        w = rng.normal(size=(widths[k], widths[k + 1])) * 0.7
        b = rng.normal(size=widths[k + 1]) * 0.2 if bias else None
        layers.append(Layer(w, b, act))
    return Mlp(layers)


def spec_for(alg, width=8, lam=0.1, alpha=0.1, seed=3, **kw):
    return MorphSpec(
        insert_after=0,
        width=width,
        activation="relu",
        algorithm=alg,
        sparse=SparseConfig(lam=lam, alpha=alpha),
        seed=seed,
        **kw,
    )


def probe_for(seed, rows, cols):
    return np.random.default_rng(seed).normal(size=(rows, cols))


def reports_equal(a: MorphReport, b: MorphReport) -> bool:
    da, db = dataclasses.asdict(a), dataclasses.asdict(b)
    da.pop("wall_time_s")
    db.pop("wall_time_s")
    return da == db


class TestPreservationConstructions:
    def test_identity_activation_exact(self):
        parent = random_parent(0, hidden="identity")
        probe = probe_for(1, 80, 6)
        spec = MorphSpec(
            insert_after=0, width=5, activation="identity", algorithm="alg1",
            sparse=SparseConfig(lam=0.0, alpha=0.0), seed=2,
        )
        _, report = morph_alg1(parent, spec, probe)
        assert report.preservation_max <= 1e-6
        assert report.n_sparse == 5

    def test_relu_mirror_exact(self):
        parent = random_parent(3, hidden="relu")
        probe = probe_for(4, 100, 6)
        d1 = 5
        mirror = np.hstack([np.eye(d1), -np.eye(d1)])
        spec = MorphSpec(
            insert_after=0, width=2 * d1, activation="relu", algorithm="alg1",
            sparse=SparseConfig(lam=0.0, alpha=0.0), seed=5,
        )
        _, report = morph_alg1(parent, spec, probe, w1_init=mirror)
        assert report.preservation_max <= 1e-6

    def test_baseline_identity_exact(self):
        parent = random_parent(6, hidden="identity")
        probe = probe_for(7, 60, 6)
        spec = MorphSpec(insert_after=0, width=5, activation="identity",
                         algorithm="baseline", seed=8)
        _, report = morph_baseline(parent, spec, probe)
        assert report.preservation_max <= 1e-6


class TestAlg1:
    def test_huge_lambda_raises_empty_layer(self):
        parent = random_parent(9)
        probe = probe_for(10, 60, 6)
        with pytest.raises(EmptyLayerError, match="lambda too large"):
            morph_alg1(parent, spec_for("alg1", lam=1e9), probe)

    def test_child_structure(self):
        parent = random_parent(11)
        probe = probe_for(12, 90, 6)
        child, report = morph_alg1(parent, spec_for("alg1"), probe)
        assert len(child.layers) == len(parent.layers) + 1
        assert child.layers[1].d_out == report.n_sparse
        assert child.layers[1].bias is None
        assert 0 < report.n_sparse <= report.n_redundant
        assert report.compression_ratio == report.n_sparse / report.n_redundant
        # untouched layers shared verbatim
        np.testing.assert_array_equal(child.layers[0].weight, parent.layers[0].weight)

    def test_insert_position_validated(self):
        parent = random_parent(13)
        probe = probe_for(14, 40, 6)
        with pytest.raises(ShapeError):
            morph_alg1(parent, dataclasses.replace(spec_for("alg1"), insert_after=1), probe)

    def test_underdetermined_probe_warns(self):
        parent = random_parent(15)
        probe = probe_for(16, 6, 6)  # fewer rows than inserted width
        with pytest.warns(RuntimeWarning, match="ridge"):
            morph_alg1(parent, spec_for("alg1", lam=0.0), probe)


class TestAlg2:
    def test_single_outer_iteration_matches_alg1(self):
        parent = random_parent(17)
        probe = probe_for(18, 90, 6)
        cfg = SparseConfig(lam=0.1, alpha=0.1, max_itr=1)
        spec1 = MorphSpec(insert_after=0, width=8, activation="relu",
                          algorithm="alg1", sparse=cfg, seed=19)
        spec2 = dataclasses.replace(spec1, algorithm="alg2")
        child1, rep1 = morph_alg1(parent, spec1, probe)
        child2, rep2 = morph_alg2(parent, spec2, probe)
        assert rep1.n_sparse == rep2.n_sparse
        for l1, l2 in zip(child1.layers, child2.layers):
            np.testing.assert_array_equal(l1.weight, l2.weight)

    def test_alternation_objective_non_increasing(self):
        # replay the documented alternation on a random 20x4 parent
        parent = random_parent(20, widths=(5, 4, 3))
        probe = probe_for(21, 20, 5)
        cfg = SparseConfig(lam=0.05, alpha=0.1)
        a1 = forward(parent, probe).activations[0]
        w1 = init_weights(4, 6, "relu", 22)
        response = a1 @ w1
        os_, _ = standardize_columns(response)
        x = response
        beta = np.ones(6)
        values = []
        for _ in range(4):
            xs, info = standardize_columns(x)
            live = ~info.constant_mask
            r = similarity_matrix(xs[:, live], cfg)
            sol = iilasso_diag(xs[:, live], os_[:, live], r, cfg, beta0=beta[live])
            beta = np.zeros(6)
            beta[live] = sol.beta
            values.append(sol.objective_trace[-1])
            w1 = refit_w1(a1, response, beta)
            x = a1 @ w1
        assert all(b <= a + 1e-8 for a, b in zip(values, values[1:]))

    def test_reports_sparsity_bounds(self):
        parent = random_parent(23)
        probe = probe_for(24, 90, 6)
        _, report = morph_alg2(parent, spec_for("alg2"), probe)
        assert 0 < report.n_sparse <= report.n_redundant


class TestAlg3:
    def test_single_neuron_reconstruction_matches_direct_computation(self):
        parent = random_parent(25)
        probe = probe_for(26, 70, 6)
        spec = MorphSpec(insert_after=0, width=1, activation="relu",
                         algorithm="alg3", sparse=SparseConfig(lam=0.0, alpha=0.0), seed=27)
        child, _ = morph_alg3(parent, spec, probe)
        taps = forward(parent, probe)
        a_new = apply_activation("relu", taps.activations[0] @ child.layers[1].weight)
        direct = a_new @ child.layers[2].weight + child.layers[2].bias
        np.testing.assert_allclose(
            forward(child, probe).pre_activations[2], direct, atol=1e-12
        )

    def test_contribution_matrices_shape_and_values(self):
        rng = np.random.default_rng(28)
        a = rng.normal(size=(7, 3))
        w2 = rng.normal(size=(3, 4))
        t = contribution_matrices(a, w2)
        assert t.shape == (3, 7, 4)
        for i in range(3):
            np.testing.assert_allclose(t[i], np.outer(a[:, i], w2[i]), atol=1e-15)

    def test_dual_path_loss_agreement(self):
        rng = np.random.default_rng(29)
        t = rng.normal(size=(5, 12, 3))
        y = rng.normal(size=(12, 3))
        beta = rng.normal(size=5)
        frob = np.linalg.norm(y - np.einsum("i,ijk->jk", beta, t)) ** 2
        z = np.stack([vectorize(t[i]) for i in range(5)], axis=1)
        stacked = np.linalg.norm(vectorize(y) - z @ beta) ** 2
        np.testing.assert_allclose(frob, stacked, rtol=1e-10)

    def test_full_row_sample_is_identity(self):
        parent = random_parent(30)
        probe = probe_for(31, 80, 6)
        spec_plain = spec_for("alg3")
        spec_full = dataclasses.replace(spec_plain, alg3_row_sample=80)
        child_a, rep_a = morph_alg3(parent, spec_plain, probe)
        child_b, rep_b = morph_alg3(parent, spec_full, probe)
        assert reports_equal(rep_a, rep_b)
        for la, lb in zip(child_a.layers, child_b.layers):
            np.testing.assert_array_equal(la.weight, lb.weight)

    def test_pruning_consistency(self):
        # padding the pruned child back to full width with zero rows/columns
        # reproduces its output: dropped zero-coefficient terms were exact
        parent = random_parent(32)
        probe = probe_for(33, 90, 6)
        spec = spec_for("alg3", lam=0.3)
        child, report = morph_alg3(parent, spec, probe)
        assert report.n_sparse < spec.width  # something was pruned
        w1_full = init_weights(parent.layers[0].d_out, spec.width, "relu", spec.seed)
        kept = child.layers[1].weight
        active = []
        j = 0
        for col in range(spec.width):
            if j < kept.shape[1] and np.array_equal(w1_full[:, col], kept[:, j]):
                active.append(col)
                j += 1
        assert len(active) == report.n_sparse
        w2_padded = np.zeros((spec.width, child.layers[2].d_out))
        w2_padded[active] = child.layers[2].weight
        padded = Mlp(
            [child.layers[0], Layer(w1_full, None, "relu"),
             Layer(w2_padded, child.layers[2].bias, "identity")]
        )
        np.testing.assert_allclose(
            forward(padded, probe).pre_activations[2],
            forward(child, probe).pre_activations[2],
            atol=1e-12,
        )

    def test_memory_guard(self, monkeypatch):
        parent = random_parent(34)
        probe = probe_for(35, 50, 6)
        monkeypatch.setattr(morph_mod, "ALG3_VALUE_BUDGET", 100)
        with pytest.raises(MorphkitError, match="alg3_row_sample"):
            morph_alg3(parent, spec_for("alg3"), probe)
        # row sampling lifts the guard
        spec = dataclasses.replace(spec_for("alg3"), alg3_row_sample=4)
        monkeypatch.setattr(morph_mod, "ALG3_VALUE_BUDGET", 4 * 8 * 3 + 1)
        child, _ = morph_alg3(parent, spec, probe)
        assert len(child.layers) == 3


class TestBaseline:
    def test_compression_ratio_is_one(self):
        parent = random_parent(36)
        probe = probe_for(37, 60, 6)
        _, report = morph_baseline(parent, spec_for("baseline"), probe)
        assert report.compression_ratio == 1.0
        assert report.n_sparse == report.n_redundant == 8

    def test_beats_random_downstream_weights(self):
        parent = random_parent(38)
        probe = probe_for(39, 80, 6)
        spec = spec_for("baseline")
        child, report = morph_baseline(parent, spec, probe)
        w1 = child.layers[1].weight
        w2_random = init_weights(spec.width, 3, "identity", spec.seed)
        random_child = Mlp(
            [parent.layers[0], Layer(w1, None, "relu"),
             Layer(w2_random, parent.layers[1].bias, "identity")]
        )
        _, random_rms = preservation_error(parent, random_child, probe, 0)
        assert report.preservation_rms <= random_rms + 1e-10


class TestRefitBenefit:
    @pytest.mark.parametrize("alg", ["alg1", "alg2", "alg3", "baseline"])
    def test_final_fit_beats_fresh_init(self, alg):
        parent = random_parent(40)
        probe = probe_for(41, 90, 6)
        spec = spec_for(alg)
        child, report = morph(parent, spec, probe)
        n_sparse = child.layers[1].d_out
        fresh = Mlp(
            [child.layers[0], child.layers[1],
             Layer(init_weights(n_sparse, 3, "identity", spec.seed),
                   parent.layers[1].bias, "identity")]
        )
        _, fresh_rms = preservation_error(parent, fresh, probe, 0)
        assert report.preservation_rms <= fresh_rms + 1e-10


class TestPreservationError:
    def test_identical_networks_give_zero(self):
        parent = random_parent(42)
        probe = probe_for(43, 40, 6)
        assert preservation_error(parent, parent, probe, 0) == (0.0, 0.0)

    def test_row_permutation_invariant(self):
        parent = random_parent(44)
        probe = probe_for(45, 50, 6)
        child, _ = morph_alg1(parent, spec_for("alg1"), probe)
        a = preservation_error(parent, child, probe, 0)
        perm = np.random.default_rng(46).permutation(50)
        b = preservation_error(parent, child, probe[perm], 0)
        assert a[0] == pytest.approx(b[0], rel=1e-12)
        assert a[1] == pytest.approx(b[1], rel=1e-12)

    def test_out_of_range_layer(self):
        parent = random_parent(47)
        probe = probe_for(48, 30, 6)
        with pytest.raises(ShapeError):
            preservation_error(parent, parent, probe, 5)


class TestFoldBeta:
    def test_all_ones_is_identity(self):
        rng = np.random.default_rng(49)
        w1 = rng.normal(size=(4, 6))
        np.testing.assert_array_equal(fold_beta(w1, np.ones(6), "relu"), w1)

    def test_folding_equals_scaling_activations(self):
        rng = np.random.default_rng(50)
        w1 = rng.normal(size=(5, 7))
        beta = rng.uniform(0.0, 1.0, size=7)
        a1 = np.abs(rng.normal(size=(20, 5)))
        folded = apply_activation("relu", a1 @ fold_beta(w1, beta, "relu"))
        scaled = apply_activation("relu", a1 @ w1) * beta[None, :]
        np.testing.assert_allclose(folded, scaled, atol=1e-12)

    def test_sigmoid_rejected(self):
        with pytest.raises(MorphkitError, match="sigmoid"):
            fold_beta(np.eye(3), np.ones(3), "sigmoid")

    def test_negative_beta_with_relu_rejected(self):
        with pytest.raises(MorphkitError, match="s >= 0"):
            fold_beta(np.eye(3), np.array([1.0, -0.5, 1.0]), "relu")

    def test_fold_flag_round_trip(self):
        parent = random_parent(51)
        probe = probe_for(52, 90, 6)
        plain = spec_for("alg1")
        folded = dataclasses.replace(plain, fold_beta=True)
        child_a, rep_a = morph_alg1(parent, plain, probe)
        child_b, rep_b = morph_alg1(parent, folded, probe)
        assert rep_a.n_sparse == rep_b.n_sparse
        # folding rescales columns but preserves the function after refit
        assert rep_b.preservation_rms <= rep_a.preservation_rms * 1.5 + 1e-9


class TestSampleRows:
    def test_covers_everything_when_large(self):
        np.testing.assert_array_equal(sample_rows(10, 10, 0), np.arange(10))
        np.testing.assert_array_equal(sample_rows(10, 99, 0), np.arange(10))
        np.testing.assert_array_equal(sample_rows(10, None, 0), np.arange(10))

    def test_sorted_unique_subset(self):
        rows = sample_rows(100, 30, 7)
        assert rows.shape == (30,)
        assert (np.diff(rows) > 0).all()
        assert rows.min() >= 0 and rows.max() < 100


class TestDeterminism:
    @pytest.mark.parametrize("alg", ["alg1", "alg2", "alg3", "baseline"])
    def test_bit_identical_reruns(self, alg):
        parent = random_parent(53)
        probe = probe_for(54, 90, 6)
        spec = spec_for(alg)
        child_a, rep_a = morph(parent, spec, probe)
        child_b, rep_b = morph(parent, spec, probe)
        assert reports_equal(rep_a, rep_b)
        for la, lb in zip(child_a.layers, child_b.layers):
            np.testing.assert_array_equal(la.weight, lb.weight)
            if la.bias is not None:
                np.testing.assert_array_equal(la.bias, lb.bias)

    def test_parent_never_mutated(self):
        parent = random_parent(55)
        snapshot = [l.weight.copy() for l in parent.layers]
        probe = probe_for(56, 90, 6)
        for alg in ("alg1", "alg2", "alg3", "baseline"):
            morph(parent, spec_for(alg), probe)
        for before, layer in zip(snapshot, parent.layers):
            np.testing.assert_array_equal(before, layer.weight)


class TestSpecValidation:
    def test_bad_algorithm(self):
        with pytest.raises(ValueError):
            MorphSpec(insert_after=0, width=4, algorithm="alg9")

    def test_bad_width(self):
        with pytest.raises(ValueError):
            MorphSpec(insert_after=0, width=0)

    def test_bad_row_sample(self):
        with pytest.raises(ValueError):
            MorphSpec(insert_after=0, width=4, alg3_row_sample=0)
