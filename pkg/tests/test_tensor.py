import numpy as np
import pytest

from icarus import tensor as T
from icarus.errors import ConfigError, ShapeError, StateError
from icarus.tensor import F32, F64, GradTape, Tensor, finite_difference_grad


def loop_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Scalar triple loop, the definitional left-to-right product."""
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            acc = a.dtype.type(0.0)
            for p in range(k):
                acc = acc + a[i, p] * b[p, j]
            out[i, j] = acc
    return out


@pytest.mark.parametrize("dtype", [F32, F64])
@pytest.mark.parametrize("shape", [(1, 5, 3), (4, 3, 2), (7, 33, 5)])
def test_matmul_matches_scalar_loop_bitwise(dtype, shape):
    m, k, n = shape
    rng = np.random.default_rng(11)
    a = (rng.standard_normal((m, k)) * 3).astype(dtype)
    b = (rng.standard_normal((k, n)) * 3).astype(dtype)
    got = T.matmul(Tensor(a), Tensor(b)).data
    want = loop_matmul(a, b)
    assert got.dtype == dtype
    assert np.array_equal(got, want)


def test_matmul_row_count_does_not_change_row_bytes():
    # The cache-reuse argument rests on this: a row's product depends
    # only on that row, not on how many rows ride in the batch.
    rng = np.random.default_rng(3)
    a = rng.standard_normal((6, 16)).astype(F32)
    b = rng.standard_normal((16, 8)).astype(F32)
    full = T.matmul(Tensor(a), Tensor(b)).data
    one = T.matmul(Tensor(a[2:3]), Tensor(b)).data
    assert np.array_equal(full[2:3], one)


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3), F32)), Tensor(np.zeros((4, 2), F32)))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 0), F32)), Tensor(np.zeros((0, 2), F32)))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros(3, F32)), Tensor(np.zeros((3, 2), F32)))


def test_mixed_dtypes_rejected():
    with pytest.raises(ShapeError):
        T.add(Tensor(np.zeros((2, 2), F32)), Tensor(np.zeros((2, 2), F64)))


def test_lsum_is_sequential_not_pairwise():
    # A sum whose value depends on association order: sequential f32
    # addition cancels step by step, pairwise does not.
    vals = np.array([1e8, 1.0, -1e8, 1.0] * 64, dtype=F32)
    seq = F32.type(0.0)
    for v in vals:
        seq = seq + v
    assert T._lsum(vals, axis=0) == seq


def test_softmax_formula_and_row_sums():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 9)).astype(F64)
    got = T.softmax_lastdim(Tensor(x)).data
    shifted = np.exp(x - x.max(axis=-1, keepdims=True))
    want = shifted / shifted.sum(axis=-1, keepdims=True)
    assert np.allclose(got, want, rtol=1e-12)
    assert np.allclose(got.sum(axis=-1), 1.0, rtol=1e-12)


def test_masked_softmax_pads_are_exact_zero_and_length_independent():
    rng = np.random.default_rng(9)
    row = rng.standard_normal((1, 6)).astype(F32)
    short = T.softmax_lastdim(Tensor(row)).data
    padded = np.concatenate([row, np.full((1, 5), F32.type(T.NEG_MASK))], axis=1)
    long = T.softmax_lastdim(Tensor(padded)).data
    assert np.all(long[:, 6:] == 0.0)
    assert np.array_equal(long[:, :6], short)


def test_rms_norm_formula():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((3, 8)).astype(F64)
    gain = rng.standard_normal(8).astype(F64)
    eps = 1e-6
    got = T.rms_norm(Tensor(x), Tensor(gain), eps).data
    want = x / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps) * gain
    assert np.allclose(got, want, rtol=1e-12)
    with pytest.raises(ConfigError):
        T.rms_norm(Tensor(x), Tensor(gain), 0.0)


def test_rope_identity_at_position_zero():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 8)).astype(F32)
    out = T.rope_apply(Tensor(x), [0, 0, 0], 10000.0).data
    assert np.array_equal(out, x)


def test_rope_two_dim_rotation_oracle():
    # For head_dim 2 the first frequency is 1, so position p rotates
    # the (even, odd) pair by exactly p radians.
    x = np.array([[1.0, 0.0]], dtype=F32)
    for p in (1, 2, 7):
        out = T.rope_apply(Tensor(x), [p], 10000.0).data
        want = np.array([[np.cos(float(p)), np.sin(float(p))]], dtype=F64).astype(F32)
        assert np.array_equal(out, want)


def test_rope_odd_dim_rejected():
    with pytest.raises(ConfigError):
        T.rope_apply(Tensor(np.zeros((1, 3), F32)), [0], 10000.0)


def test_silu_formula_and_extremes():
    x = np.array([[-88.0, -4.0, 0.0, 4.0, 88.0]], dtype=F32)
    got = T.silu(Tensor(x)).data
    want = x / (1.0 + np.exp(-x.astype(F64))).astype(F32)
    assert np.allclose(got, want, rtol=1e-6)
    assert np.all(np.isfinite(got))


def test_cross_entropy_logsumexp_oracle():
    rng = np.random.default_rng(8)
    logits = rng.standard_normal(11).astype(F64)
    for target in (0, 5, 10):
        got = float(T.cross_entropy(Tensor(logits), target).data)
        m = logits.max()
        want = float(np.log(np.sum(np.exp(logits - m))) + m - logits[target])
        assert abs(got - want) < 1e-12


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros(4, F32)), 4)
    with pytest.raises(IndexError):
        T.cross_entropy_rows(Tensor(np.zeros((2, 4), F32)), np.array([0, -5]))


# -- gradients ---------------------------------------------------------------


def _fd_against_tape(forward, leaves):
    for t in leaves:
        def f(arr, t=t):
            saved = t.data
            t.data = arr
            try:
                return float(forward().data)
            finally:
                t.data = saved

        want = finite_difference_grad(f, t.data.copy())
        rel = np.max(np.abs(t.grad - want)) / max(np.max(np.abs(want)), 1e-12)
        assert rel < 1e-4, f"leaf {t.shape}: rel err {rel}"


def test_matmul_chain_gradient_matches_fd():
    rng = np.random.default_rng(21)
    a = Tensor(rng.standard_normal((3, 4)).astype(F64), trainable=True)
    b = Tensor(rng.standard_normal((4, 5)).astype(F64), trainable=True)
    c = Tensor(rng.standard_normal((5, 2)).astype(F64))
    targets = np.zeros(3, np.int64)

    def forward():
        prod = T.matmul(T.matmul(a, b), c)
        return T.cross_entropy_rows(T.mul(prod, prod), targets)

    with GradTape() as tape:
        tape.backward(forward())
    assert a.grad is not None and b.grad is not None
    assert c.grad is None
    _fd_against_tape(forward, (a, b))


def test_composite_graph_gradient_matches_fd():
    rng = np.random.default_rng(31)
    w = Tensor(rng.standard_normal((6, 6)).astype(F64), trainable=True)
    x = Tensor(rng.standard_normal((2, 6)).astype(F64))
    gain = Tensor(rng.standard_normal(6).astype(F64), trainable=True)

    def forward():
        h = T.rms_norm(T.matmul(x, w), gain, 1e-6)
        s = T.silu(T.slice_cols(h, 0, 3))
        u = T.slice_cols(h, 3, 6)
        merged = T.concat_cols([T.mul(s, u), T.scale(s, 0.5)])
        return T.cross_entropy_rows(merged, np.array([1, 4]))

    with GradTape() as tape:
        tape.backward(forward())
    _fd_against_tape(forward, (w, gain))


def test_frozen_leaves_never_get_grad():
    a = Tensor(np.ones((2, 2), F64), trainable=True)
    frozen = Tensor(np.ones((2, 2), F64))
    with GradTape() as tape:
        out = T.matmul(a, frozen)
        loss = T.cross_entropy_rows(out, np.array([0, 1]))
        tape.backward(loss)
    assert a.grad is not None
    assert frozen.grad is None


def test_all_frozen_graph_records_nothing():
    a = Tensor(np.ones((2, 2), F64))
    b = Tensor(np.ones((2, 2), F64))
    with GradTape() as tape:
        T.matmul(a, b)
        assert len(tape) == 0
        with pytest.raises(StateError):
            tape.backward(T.cross_entropy_rows(T.matmul(a, b), np.array([0, 0])))


def test_backward_requires_scalar():
    a = Tensor(np.ones((2, 2), F64), trainable=True)
    with GradTape() as tape:
        out = T.matmul(a, a)
        with pytest.raises(ShapeError):
            tape.backward(out)


def test_leaf_grads_accumulate_across_backward_calls():
    a = Tensor(np.array([[1.0, 2.0]], dtype=F64), trainable=True)
    with GradTape() as tape:
        loss = T.cross_entropy_rows(a, np.array([0]))
        tape.backward(loss)
        once = a.grad.copy()
        tape.backward(loss)
    assert np.array_equal(a.grad, once + once)


def test_gather_and_slice_rows_roundtrip():
    table = Tensor(np.arange(20, dtype=F32).reshape(5, 4))
    rows = T.gather_rows(table, np.array([4, 0, 2]))
    assert np.array_equal(rows.data, table.data[[4, 0, 2]])
    with pytest.raises(IndexError):
        T.gather_rows(table, np.array([5]))
    mid = T.slice_rows(rows, 1, 3)
    assert np.array_equal(mid.data, table.data[[0, 2]])
    back = T.concat_rows([T.slice_rows(rows, 0, 1), mid])
    assert np.array_equal(back.data, rows.data)


def test_same_inputs_same_bytes():
    rng = np.random.default_rng(6)
    a = rng.standard_normal((5, 7)).astype(F32)
    b = rng.standard_normal((7, 3)).astype(F32)
    r1 = T.matmul(Tensor(a), Tensor(b)).data
    r2 = T.matmul(Tensor(a.copy()), Tensor(b.copy())).data
    assert r1.tobytes() == r2.tobytes()


def test_finite_difference_refuses_f32():
    with pytest.raises(ConfigError):
        finite_difference_grad(lambda x: float(x.sum()), np.zeros(3, F32))


def test_finite_difference_linear_is_exact():
    w = np.array([2.0, -3.0, 0.5], dtype=F64)
    got = finite_difference_grad(lambda x: float(x @ w), np.zeros(3, F64))
    assert np.allclose(got, w, atol=1e-9)
