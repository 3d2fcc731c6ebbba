"""Join-strategy contracts: hand values, envelopes, equivariance, MLP range."""
import numpy as np
import pytest

from demandrec.autodiff import ShapeError, Tape, Tensor
from demandrec.joining import STRATEGIES, JoinParams, join


def prob_rows(*rows):
    return [Tensor(np.asarray(r, dtype=float)) for r in rows]


def make_params(strategy, num_scales, num_items, seed=0):
    return JoinParams.initialize(
        strategy, num_scales, num_items, np.random.default_rng(seed)
    )


class TestHandCases:
    def test_average_hand_mean(self):
        rows = prob_rows([0.2, 0.8], [0.6, 0.4])
        out = join(Tape(), rows, make_params("average", 2, 2))
        np.testing.assert_allclose(out.data, [0.4, 0.6])

    def test_max_hand(self):
        rows = prob_rows([0.2, 0.8], [0.6, 0.4])
        out = join(Tape(), rows, make_params("max", 2, 2))
        np.testing.assert_allclose(out.data, [0.6, 0.8])

    def test_identical_rows_idempotent(self):
        for strategy in ("average", "max"):
            rows = prob_rows([0.1, 0.6, 0.3], [0.1, 0.6, 0.3])
            out = join(Tape(), rows, make_params(strategy, 2, 3))
            np.testing.assert_allclose(out.data, [0.1, 0.6, 0.3])

    def test_mlp_zero_weights_half_everywhere(self):
        params = make_params("mlp", 2, 3)
        params.hidden_w.data[:] = 0.0
        params.hidden_b.data[:] = 0.0
        params.output_w.data[:] = 0.0
        rows = prob_rows([0.2, 0.3, 0.5], [0.5, 0.25, 0.25])
        out = join(Tape(), rows, params)
        np.testing.assert_allclose(out.data, [0.5, 0.5, 0.5])

    def test_weighted_hand_case(self):
        params = make_params("weighted", 2, 2)
        params.scale_weights[0].data[:] = [1.0, 2.0]
        params.scale_weights[1].data[:] = [0.5, -1.0]
        rows = prob_rows([0.2, 0.8], [0.6, 0.4])
        out = join(Tape(), rows, params)
        np.testing.assert_allclose(out.data, [(0.2 + 0.3) / 2, (1.6 - 0.4) / 2])


class TestProperties:
    def test_average_max_envelope(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            raw = rng.dirichlet(np.ones(6), size=3)
            rows = prob_rows(*raw)
            lo, hi = raw.min(axis=0), raw.max(axis=0)
            for strategy in ("average", "max"):
                out = join(Tape(), rows, make_params(strategy, 3, 6))
                assert np.all(out.data >= lo - 1e-12)
                assert np.all(out.data <= hi + 1e-12)

    def test_average_max_permutation_equivariant(self):
        rng = np.random.default_rng(4)
        raw = rng.dirichlet(np.ones(5), size=3)
        for strategy in ("average", "max"):
            p = make_params(strategy, 3, 5)
            a = join(Tape(), prob_rows(*raw), p)
            b = join(Tape(), prob_rows(*raw[::-1]), p)
            np.testing.assert_allclose(a.data, b.data, atol=1e-15)

    def test_weighted_mlp_not_permutation_equivariant(self):
        rng = np.random.default_rng(5)
        raw = rng.dirichlet(np.ones(5), size=2)
        for strategy in ("weighted", "mlp"):
            p = make_params(strategy, 2, 5, seed=8)
            a = join(Tape(), prob_rows(*raw), p)
            b = join(Tape(), prob_rows(*raw[::-1]), p)
            assert not np.allclose(a.data, b.data), strategy

    def test_mlp_output_in_unit_interval(self):
        rng = np.random.default_rng(6)
        p = make_params("mlp", 3, 7, seed=1)
        for _ in range(50):
            rows = prob_rows(*rng.dirichlet(np.ones(7), size=3))
            out = join(Tape(), rows, p)
            assert np.all(out.data > 0.0) and np.all(out.data < 1.0)

    def test_single_scale_identity(self):
        rng = np.random.default_rng(7)
        row = rng.dirichlet(np.ones(4))
        for strategy in ("average", "max"):
            out = join(Tape(), prob_rows(row), make_params(strategy, 1, 4))
            np.testing.assert_allclose(out.data, row, atol=1e-15)


class TestShapesAndSerialization:
    def test_row_count_mismatch(self):
        with pytest.raises(ShapeError, match="expected 2 scale vectors"):
            join(Tape(), prob_rows([0.5, 0.5]), make_params("average", 2, 2))

    def test_row_length_mismatch(self):
        with pytest.raises(ShapeError, match=r"\(3,\)"):
            join(
                Tape(),
                prob_rows([0.2, 0.3, 0.5], [0.5, 0.5]),
                make_params("average", 2, 3),
            )

    def test_unknown_strategy(self):
        with pytest.raises(ValueError, match="unknown join strategy"):
            JoinParams.initialize("blend", 2, 3, np.random.default_rng(0))

    @pytest.mark.parametrize("strategy", STRATEGIES)
    def test_tensor_round_trip(self, strategy):
        p = make_params(strategy, 2, 4, seed=11)
        clone = JoinParams.from_tensors(strategy, 2, 4, p.tensors())
        rows = prob_rows([0.1, 0.2, 0.3, 0.4], [0.4, 0.3, 0.2, 0.1])
        np.testing.assert_allclose(
            join(Tape(), rows, p).data, join(Tape(), rows, clone).data
        )

    def test_gradients_flow_through_joins(self):
        from demandrec.autodiff import grad_check

        rng = np.random.default_rng(9)
        rows = [Tensor(rng.dirichlet(np.ones(4)), name=f"row{i}") for i in range(2)]
        for strategy in STRATEGIES:
            p = make_params(strategy, 2, 4, seed=3)
            cot = Tensor(rng.uniform(-1, 1, 4), constant=True)

            def f(tape):
                return tape.sum(tape.mul(join(tape, rows, p), cot))

            report = grad_check(f, rows + p.parameters(), tol=1e-5)
            assert report.passed, f"{strategy}: {report}"
