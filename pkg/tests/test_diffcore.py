import math

import numpy as np
import pytest

from sdrelab import diffcore as dc


def const(x):
    return dc.Tensor(np.asarray(x, dtype=np.float64))


def scalar_sum(t):
    return dc.sum_axis(t)


def test_softmax_symmetry():
    out = dc.softmax(const([0.0, 0.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5], rtol=0, atol=0)


def test_logsumexp_of_two_zeros_is_log2():
    out = dc.logsumexp(const([0.0, 0.0]))
    assert math.isclose(float(out.data), math.log(2.0), rel_tol=1e-15)


def test_matmul_of_ones():
    out = dc.matmul(const(np.ones((2, 3))), const(np.ones((3, 1))))
    np.testing.assert_array_equal(out.data, [[3.0], [3.0]])


def test_backward_of_sum_is_ones():
    p = const([1.0, 2.0, 3.0])
    with dc.Tape() as tape:
        tape.watch(p)
        loss = scalar_sum(p)
    grads = dc.backward(loss, tape)
    np.testing.assert_array_equal(grads[p], [1.0, 1.0, 1.0])


def test_backward_of_sum_of_squares():
    p = const([1.0, 2.0, 3.0])
    with dc.Tape() as tape:
        tape.watch(p)
        loss = scalar_sum(dc.multiply(p, p))
    grads = dc.backward(loss, tape)
    np.testing.assert_array_equal(grads[p], [2.0, 4.0, 6.0])


def test_untouched_parameter_gets_zero_gradient():
    p = const([1.0, 2.0])
    q = const(np.ones((2, 2)))
    with dc.Tape() as tape:
        tape.watch(p, q)
        loss = scalar_sum(dc.multiply(p, p))
    grads = dc.backward(loss, tape)
    np.testing.assert_array_equal(grads[q], np.zeros((2, 2)))


def test_non_scalar_loss_rejected():
    p = const([1.0, 2.0])
    with dc.Tape() as tape:
        tape.watch(p)
        loss = dc.multiply(p, p)
    with pytest.raises(dc.ShapeError):
        dc.backward(loss, tape)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(dc.ShapeError, match=r"matmul.*\(2, 3\)"):
        dc.matmul(const(np.ones((2, 3))), const(np.ones((2, 3))))
    with pytest.raises(dc.ShapeError, match="add"):
        dc.add(const(np.ones(3)), const(np.ones(4)))


def test_log_of_nonpositive_is_hard_error():
    with pytest.raises(dc.DomainError):
        dc.log(const([1.0, 0.0]))
    with pytest.raises(dc.DomainError):
        dc.log(const([-1.0]))


def test_b2bsqrt_rejects_nonpositive_alpha():
    with pytest.raises(dc.DomainError):
        dc.b2bsqrt(const([1.0]), alpha=0.0)


def test_finite_diff_on_sum_of_squares_is_tight():
    p = const([0.7, -1.2, 2.0])
    err = dc.finite_diff_check(lambda q: scalar_sum(dc.multiply(q, q)), [p], eps=1e-3)
    assert err < 1e-6


def test_finite_diff_on_constant_function_is_zero():
    p = const([0.5, 1.5])
    err = dc.finite_diff_check(lambda q: scalar_sum(dc.multiply(q, const([0.0, 0.0]))), [p], eps=1e-3)
    assert err == 0.0


def _loss_for_kind(kind, cot):
    """Build a scalar loss touching one primitive, with a random cotangent."""
    weight = const(cot)

    def wrap(out):
        return scalar_sum(dc.multiply(out, weight))

    if kind == "matmul":
        return lambda a, b: wrap(dc.matmul(a, b))
    if kind == "matmul-transpose":
        return lambda a, b: wrap(dc.matmul(a, b, transpose_b=True))
    if kind == "matmul-batched":
        return lambda a, b: wrap(dc.matmul(a, b))
    if kind == "add":
        return lambda a, b: wrap(dc.add(a, b))
    if kind == "multiply":
        return lambda a, b: wrap(dc.multiply(a, b))
    if kind == "sigmoid":
        return lambda a: wrap(dc.sigmoid(a))
    if kind == "tanh":
        return lambda a: wrap(dc.tanh(a))
    if kind == "b2bsqrt":
        return lambda a: wrap(dc.b2bsqrt(a, alpha=1.0))
    if kind == "log":
        return lambda a: wrap(dc.log(a))
    if kind == "softmax-last-axis":
        return lambda a: wrap(dc.softmax(a))
    if kind == "logsumexp-last-axis":
        return lambda a: wrap(dc.logsumexp(a))
    if kind == "sum-axis":
        return lambda a: wrap(dc.sum_axis(a, axis=1, keepdims=True))
    if kind == "scale":
        return lambda a: wrap(dc.scale(a, 1.7))
    if kind == "concat":
        return lambda a, b: wrap(dc.concat([a, b], axis=1))
    if kind == "layernorm-last-axis":
        return lambda a: wrap(dc.layernorm(a))
    if kind == "reshape":
        return lambda a: wrap(dc.reshape(a, (2, 6)))
    if kind == "cumsum-axis":
        return lambda a: wrap(dc.cumsum(a, axis=0))
    raise AssertionError(kind)


_KIND_SHAPES = {
    "matmul": [(3, 4), (4, 2)],
    "matmul-transpose": [(3, 4), (2, 4)],
    "matmul-batched": [(2, 3, 4), (4, 2)],
    "add": [(3, 4), (4,)],
    "multiply": [(3, 4), (3, 1)],
    "sigmoid": [(3, 5)],
    "tanh": [(3, 5)],
    "b2bsqrt": [(3, 5)],
    "log": [(3, 5)],
    "softmax-last-axis": [(3, 5)],
    "logsumexp-last-axis": [(3, 5)],
    "sum-axis": [(3, 4)],
    "scale": [(3, 4)],
    "concat": [(3, 2), (3, 4)],
    "layernorm-last-axis": [(3, 5)],
    "reshape": [(3, 4)],
    "cumsum-axis": [(4, 3)],
}

_OUT_SHAPES = {
    "matmul": (3, 2),
    "matmul-transpose": (3, 2),
    "matmul-batched": (2, 3, 2),
    "add": (3, 4),
    "multiply": (3, 4),
    "sigmoid": (3, 5),
    "tanh": (3, 5),
    "b2bsqrt": (3, 5),
    "log": (3, 5),
    "softmax-last-axis": (3, 5),
    "logsumexp-last-axis": (3,),
    "sum-axis": (3, 1),
    "scale": (3, 4),
    "concat": (3, 6),
    "layernorm-last-axis": (3, 5),
    "reshape": (2, 6),
    "cumsum-axis": (4, 3),
}


@pytest.mark.parametrize("kind", sorted(_KIND_SHAPES))
def test_every_primitive_gradient_matches_finite_differences(kind):
    for trial in range(20):
        rng = np.random.default_rng(1000 * trial + hash(kind) % 997)
        params = []
        for shape in _KIND_SHAPES[kind]:
            x = rng.uniform(-2.0, 2.0, size=shape)
            if kind == "log":
                x = np.abs(x) + 0.1
            if kind == "b2bsqrt":
                # keep away from the curvature kink of |x| at the origin
                x = np.where(np.abs(x) < 1e-2, 0.05 * np.sign(x) + (x == 0) * 0.05, x)
            params.append(const(x))
        loss = _loss_for_kind(kind, rng.uniform(-1.0, 1.0, size=_OUT_SHAPES[kind]))
        err = dc.finite_diff_check(loss, params, eps=1e-3)
        assert err < 1e-4, f"{kind} trial {trial}: finite-diff error {err:.3e}"


def test_composite_of_all_primitive_kinds():
    rng = np.random.default_rng(7)
    a = const(rng.uniform(-1.0, 1.0, size=(3, 4)))
    b = const(rng.uniform(-1.0, 1.0, size=(4, 4)))
    c = const(rng.uniform(-1.0, 1.0, size=(3, 4)))

    def f(a, b, c):
        h = dc.matmul(a, b)
        h = dc.add(h, c)
        h = dc.layernorm(h)
        h = dc.concat([dc.tanh(h), dc.sigmoid(h)], axis=1)
        h = dc.b2bsqrt(h, alpha=1.0)
        h = dc.reshape(h, (3, 8))
        h = dc.cumsum(h, axis=1)
        h = dc.multiply(h, dc.scale(h, 0.5))
        p = dc.softmax(h)
        lse = dc.logsumexp(h, keepdims=True)
        q = dc.log(p)
        return dc.sum_axis(dc.add(dc.sum_axis(q, axis=1, keepdims=True), lse))

    err = dc.finite_diff_check(f, [a, b, c], eps=1e-3)
    assert err < 1e-4


def test_softmax_rows_sum_to_one_and_lie_inside_unit_interval():
    rng = np.random.default_rng(3)
    x = const(rng.normal(0, 5, size=(40, 7)))
    y = dc.softmax(x).data
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, rtol=0, atol=1e-12)
    assert np.all(y > 0) and np.all(y < 1)


def test_forward_primitive_dispatch_matches_direct_calls():
    rng = np.random.default_rng(11)
    a = const(rng.normal(size=(3, 4)))
    b = const(rng.normal(size=(4, 2)))
    via_dispatch = dc.forward_primitive("matmul", [a, b], {})
    np.testing.assert_array_equal(via_dispatch.data, dc.matmul(a, b).data)
    s = dc.forward_primitive("softmax-last-axis", [a], {})
    np.testing.assert_array_equal(s.data, dc.softmax(a).data)
    z = dc.forward_primitive("b2bsqrt", [a], {"alpha": 2.0})
    np.testing.assert_array_equal(z.data, dc.b2bsqrt(a, alpha=2.0).data)
    with pytest.raises(KeyError):
        dc.forward_primitive("no-such-op", [a], {})


def test_dispatch_records_on_active_tape():
    a = const([[1.0, 2.0]])
    with dc.Tape() as tape:
        tape.watch(a)
        out = dc.forward_primitive("scale", [a], {"factor": 3.0})
        loss = dc.sum_axis(out)
    grads = dc.backward(loss, tape)
    np.testing.assert_array_equal(grads[a], [[3.0, 3.0]])


def test_identical_runs_are_bit_identical():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(6, 6))
    w = rng.normal(size=(6, 6))

    def run():
        xt, wt = const(x.copy()), const(w.copy())
        with dc.Tape() as tape:
            tape.watch(wt)
            h = dc.tanh(dc.matmul(xt, wt))
            loss = dc.sum_axis(dc.multiply(h, h))
        g = dc.backward(loss, tape)
        return float(loss.data), g[wt].copy()

    loss_a, grad_a = run()
    loss_b, grad_b = run()
    assert loss_a == loss_b
    np.testing.assert_array_equal(grad_a, grad_b)


def test_gradients_accumulate_across_reuse():
    p = const([2.0])
    with dc.Tape() as tape:
        tape.watch(p)
        # p used twice: d/dp (p*p + 3p) = 2p + 3 = 7
        loss = dc.sum_axis(dc.add(dc.multiply(p, p), dc.scale(p, 3.0)))
    grads = dc.backward(loss, tape)
    np.testing.assert_allclose(grads[p], [7.0], rtol=0, atol=0)


def test_nested_tapes_do_not_leak_records():
    p = const([1.0, 2.0])
    with dc.Tape() as outer:
        outer.watch(p)
        _ = dc.scale(p, 2.0)
        with dc.Tape() as inner:
            _ = dc.scale(p, 5.0)
        assert len(inner) == 1
    assert len(outer) == 1
    assert dc.active_tape() is None


def test_tapes_are_confined_to_their_threads():
    import threading

    results = {}

    def worker(name, factor):
        p = const([1.0, 2.0, 3.0])
        with dc.Tape() as tape:
            tape.watch(p)
            loss = dc.sum_axis(dc.multiply(dc.scale(p, factor), p))
        results[name] = dc.backward(loss, tape)[p]

    threads = [
        threading.Thread(target=worker, args=("a", 2.0)),
        threading.Thread(target=worker, args=("b", 5.0)),
    ]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    # d/dp of factor * p^2 = 2 * factor * p, independently per thread
    np.testing.assert_array_equal(results["a"], [4.0, 8.0, 12.0])
    np.testing.assert_array_equal(results["b"], [10.0, 20.0, 30.0])
