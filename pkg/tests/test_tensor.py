import numpy as np
import pytest
from hypothesis import given, settings as hyp_settings
from hypothesis import strategies as st

import oracles
from sparselm.tensor import (
    NonFiniteError,
    Tape,
    TapeError,
    Tensor,
    add,
    backward,
    concat_cols,
    divide_scalar,
    dropout,
    finite_diff_grad,
    gather_rows,
    gelu,
    layer_norm,
    masked_softmax,
    matmul,
    mul,
    recording,
    settings,
    slice_cols,
    tensor_mean,
    tensor_sum,
    transpose,
)

# sigmoid(1.702) evaluated at 40 digits with mpmath
GELU_AT_ONE = 0.84579576593282129571


def grad_of(fn, *leaves):
    tape = Tape()
    with recording(tape):
        loss = fn()
    grads = tape.backward(loss)
    return [grads.get(leaf.id) for leaf in leaves]


class TestMatmul:
    def test_identity(self, rng):
        b = Tensor(rng.standard_normal((3, 4)))
        out = matmul(Tensor(np.eye(3)), b)
        np.testing.assert_array_equal(out.data, b.data)

    def test_hand_case(self):
        out = matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
        np.testing.assert_array_equal(out.data, [[11.0]])

    def test_against_triple_loop(self, rng):
        a = rng.standard_normal((7, 5))
        b = rng.standard_normal((5, 3))
        got = matmul(Tensor(a), Tensor(b)).data
        want = oracles.matmul_loops(a, b)
        assert np.abs(got - want).max() <= 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestMaskedSoftmax:
    def test_uniform_over_allowed(self):
        logits = Tensor(np.full((1, 6), 2.5))
        mask = np.zeros((1, 6), dtype=bool)
        mask[0, [0, 2, 3, 5]] = True
        out = masked_softmax(logits, mask).data
        np.testing.assert_allclose(out[0, [0, 2, 3, 5]], 0.25)
        assert (out[0, [1, 4]] == 0.0).all()

    def test_singleton(self, rng):
        logits = Tensor(rng.standard_normal((3, 5)))
        mask = np.zeros((3, 5), dtype=bool)
        mask[0, 4] = mask[1, 0] = mask[2, 2] = True
        out = masked_softmax(logits, mask).data
        assert out[0, 4] == 1.0 and out[1, 0] == 1.0 and out[2, 2] == 1.0
        assert out.sum() == 3.0

    def test_against_neginf_oracle(self, rng):
        x = rng.standard_normal((8, 16))
        mask = rng.random((8, 16)) < 0.4
        mask[np.arange(8), rng.integers(0, 16, 8)] = True  # nonempty rows
        got = masked_softmax(Tensor(x), mask).data
        want = oracles.neginf_softmax(x, mask)
        assert np.abs(got - want).max() <= 1e-12

    def test_rows_sum_to_one_and_zero_outside(self, rng):
        x = rng.standard_normal((10, 12)) * 100
        mask = rng.random((10, 12)) < 0.5
        mask[:, 0] = True
        out = masked_softmax(Tensor(x), mask).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
        assert (out[~mask] == 0.0).all()

    def test_index_set_argument(self):
        out = masked_softmax(Tensor(np.zeros((2, 4))), [[0, 1], [2]]).data
        np.testing.assert_allclose(out[0, :2], 0.5)
        assert out[1, 2] == 1.0

    def test_empty_row_rejected(self):
        mask = np.zeros((2, 3), dtype=bool)
        mask[0, 0] = True
        with pytest.raises(ValueError, match="row 1"):
            masked_softmax(Tensor(np.zeros((2, 3))), mask)


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        x = Tensor(np.full((2, 8), 3.7))
        out = layer_norm(x, Tensor(np.ones(8)), Tensor(np.zeros(8))).data
        np.testing.assert_array_equal(out, np.zeros((2, 8)))

    def test_already_normalized_row(self):
        x = Tensor(np.array([[1.0, -1.0]]))
        out = layer_norm(x, Tensor(np.ones(2)), Tensor(np.zeros(2))).data
        np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-4)

    def test_against_two_pass_oracle(self, rng):
        x = rng.standard_normal((4, 8)) * 3 + 1
        gain = rng.standard_normal(8)
        bias = rng.standard_normal(8)
        got = layer_norm(Tensor(x), Tensor(gain), Tensor(bias)).data
        want = oracles.layer_norm_twopass(x, gain, bias)
        assert np.abs(got - want).max() <= 1e-10

    def test_rows_standardized(self, rng):
        x = rng.standard_normal((5, 64)) * 10
        out = layer_norm(Tensor(x), Tensor(np.ones(64)), Tensor(np.zeros(64))).data
        np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(axis=1), 1.0, atol=1e-4)


class TestGelu:
    def test_zero(self):
        assert gelu(Tensor(np.array([0.0]))).data[0] == 0.0

    def test_at_one(self):
        got = gelu(Tensor(np.array([1.0]))).data[0]
        assert abs(got - GELU_AT_ONE) <= 1e-12

    def test_saturation(self):
        out = gelu(Tensor(np.array([-20.0, 20.0]))).data
        assert abs(out[0]) <= 1e-8
        assert abs(out[1] - 20.0) <= 1e-8


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = Tensor(rng.standard_normal((3, 4)))
        (g,) = grad_of(lambda: tensor_sum(x), x)
        np.testing.assert_array_equal(g, np.ones((3, 4)))

    def test_quadratic(self):
        x = Tensor(np.array([1.0, 2.0, 3.0]))
        (g,) = grad_of(lambda: tensor_sum(mul(x, x)), x)
        np.testing.assert_array_equal(g, [2.0, 4.0, 6.0])

    def test_two_layer_model_matches_finite_differences(self, rng):
        leaves = {
            "w1": Tensor(rng.standard_normal((6, 8))),
            "b1": Tensor(rng.standard_normal(8)),
            "w2": Tensor(rng.standard_normal((8, 3))),
            "x": Tensor(rng.standard_normal((5, 6))),
        }

        def net(w1, b1, w2, x):
            h = gelu(add(matmul(x, w1), b1))
            out = matmul(h, w2)
            return tensor_mean(mul(out, out))

        for name, leaf in leaves.items():
            def fn(t, _name=name):
                bound = dict(leaves)
                bound[_name] = t
                return net(bound["w1"], bound["b1"], bound["w2"], bound["x"])

            (g,) = grad_of(lambda _t=leaf, _n=name: fn(_t, _n), leaf)
            fd = finite_diff_grad(fn, leaf)
            rel = np.abs(g - fd).max() / max(np.abs(fd).max(), 1e-8)
            assert rel <= 1e-5, f"gradient mismatch for {name}: {rel}"

    def test_loss_must_be_scalar(self, rng):
        x = Tensor(rng.standard_normal((2, 2)))
        tape = Tape()
        with recording(tape):
            y = mul(x, x)
        with pytest.raises(TapeError, match="scalar"):
            tape.backward(y)

    def test_loss_must_be_on_tape(self, rng):
        x = Tensor(rng.standard_normal(3))
        tape = Tape()
        with recording(tape):
            tensor_sum(x)
        stray = tensor_sum(x)  # recorded nowhere
        with pytest.raises(TapeError, match="not produced"):
            tape.backward(stray)

    def test_tape_single_use(self):
        x = Tensor(np.ones(3))
        tape = Tape()
        with recording(tape):
            y = tensor_sum(x)
        tape.backward(y)
        with pytest.raises(TapeError, match="consumed"):
            tape.backward(y)


class TestFiniteDiff:
    def test_sum(self, rng):
        x = Tensor(rng.standard_normal(5))
        fd = finite_diff_grad(tensor_sum, x)
        np.testing.assert_allclose(fd, np.ones(5), atol=1e-9)

    def test_square_at_three(self):
        x = Tensor(np.array([3.0]))
        fd = finite_diff_grad(lambda t: tensor_sum(mul(t, t)), x, eps=1e-5)
        assert abs(fd[0] - 6.0) <= 1e-8


def _rel_err(analytic, fd):
    return np.abs(analytic - fd).max() / max(np.abs(fd).max(), 1e-10)


OP_CASES = {
    "add_broadcast": lambda x, aux: tensor_sum(mul(add(x, aux["bias"]), aux["r"])),
    "mul": lambda x, aux: tensor_sum(mul(mul(x, aux["other"]), aux["r"])),
    "divide_scalar": lambda x, aux: tensor_sum(mul(divide_scalar(x, 3.7), aux["r"])),
    "matmul_left": lambda x, aux: tensor_sum(mul(matmul(x, aux["mat"]), aux["rm"])),
    "transpose": lambda x, aux: tensor_sum(mul(transpose(x), aux["rt"])),
    "gelu": lambda x, aux: tensor_sum(mul(gelu(x), aux["r"])),
    "layer_norm": lambda x, aux: tensor_sum(
        mul(layer_norm(x, aux["gain"], aux["beta"]), aux["r"])
    ),
    "masked_softmax": lambda x, aux: tensor_sum(
        mul(masked_softmax(x, aux["mask"]), aux["r"])
    ),
    "dropout": lambda x, aux: tensor_sum(mul(dropout(x, 0.3, seed=99), aux["r"])),
    "slice_cols": lambda x, aux: tensor_sum(mul(slice_cols(x, 1, 4), aux["rs"])),
    "concat_cols": lambda x, aux: tensor_sum(
        mul(concat_cols([x, mul(x, 2.0)]), aux["rc"])
    ),
    "mean": lambda x, aux: tensor_mean(mul(x, mul(x, aux["r"]))),
}


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_finite_differences(name, rng):
    x = Tensor(rng.standard_normal((6, 7)))
    mask = rng.random((6, 7)) < 0.5
    mask[:, 0] = True
    aux = {
        "bias": Tensor(rng.standard_normal(7)),
        "other": Tensor(rng.standard_normal((6, 7))),
        "mat": Tensor(rng.standard_normal((7, 4))),
        "gain": Tensor(rng.standard_normal(7)),
        "beta": Tensor(rng.standard_normal(7)),
        "mask": mask,
        "r": Tensor(rng.standard_normal((6, 7))),
        "rm": Tensor(rng.standard_normal((6, 4))),
        "rt": Tensor(rng.standard_normal((7, 6))),
        "rs": Tensor(rng.standard_normal((6, 3))),
        "rc": Tensor(rng.standard_normal((6, 14))),
    }
    fn = OP_CASES[name]
    (g,) = grad_of(lambda: fn(x, aux), x)
    fd = finite_diff_grad(lambda t: fn(t, aux), x)
    assert _rel_err(g, fd) <= 1e-5


def test_gather_rows_gradient(rng):
    w = Tensor(rng.standard_normal((5, 4)))
    idx = np.array([0, 3, 3, 1])
    r = Tensor(rng.standard_normal((4, 4)))
    (g,) = grad_of(lambda: tensor_sum(mul(gather_rows(w, idx), r)), w)
    fd = finite_diff_grad(
        lambda t: tensor_sum(mul(gather_rows(t, idx), r)), w
    )
    assert _rel_err(g, fd) <= 1e-5


def test_gather_rows_bounds():
    with pytest.raises(IndexError):
        gather_rows(Tensor(np.ones((3, 2))), np.array([0, 3]))


def test_dropout_reproducible_and_scaled(rng):
    x = Tensor(rng.standard_normal((50, 40)))
    a = dropout(x, 0.25, seed=7).data
    b = dropout(x, 0.25, seed=7).data
    np.testing.assert_array_equal(a, b)
    kept = a != 0
    np.testing.assert_allclose(a[kept], x.data[kept] / 0.75)
    assert abs(kept.mean() - 0.75) < 0.03


def test_dropout_rate_validation():
    with pytest.raises(ValueError):
        dropout(Tensor(np.ones(3)), 1.0, seed=0)


def test_no_nan_inf_on_bounded_inputs(rng):
    settings.check_finite = True
    x = rng.uniform(-1e3, 1e3, size=(8, 16))
    mask = np.tril(np.ones((8, 8), dtype=bool))
    gelu(Tensor(x))
    layer_norm(Tensor(x), Tensor(np.ones(16)), Tensor(np.zeros(16)))
    masked_softmax(Tensor(x[:, :8]), mask)
    matmul(Tensor(x), Tensor(x.T))
    layer_norm(Tensor(np.full((3, 5), 123.0)), Tensor(np.ones(5)), Tensor(np.zeros(5)))


def test_check_finite_flags_bad_values():
    settings.check_finite = True
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        mul(Tensor(np.array([1e308])), Tensor(np.array([1e308])))


@hyp_settings(max_examples=30, deadline=None)
@given(
    rows=st.integers(1, 6),
    cols=st.integers(1, 8),
    seed=st.integers(0, 2**31 - 1),
)
def test_masked_softmax_properties(rows, cols, seed):
    r = np.random.default_rng(seed)
    x = r.standard_normal((rows, cols)) * r.uniform(0.1, 50)
    mask = r.random((rows, cols)) < 0.5
    mask[np.arange(rows), r.integers(0, cols, rows)] = True
    out = masked_softmax(Tensor(x), mask).data
    assert (out[~mask] == 0.0).all()
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-6)
    assert (out >= 0).all()


def test_module_backward_alias(rng):
    x = Tensor(rng.standard_normal(4))
    tape = Tape()
    with recording(tape):
        y = tensor_sum(x)
    grads = backward(tape, y)
    np.testing.assert_array_equal(grads[x.id], np.ones(4))
