import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from rank_moe import autodiff as ad
from rank_moe.autodiff import Adam, ComputeGraph, ShapeError, Tensor

from gradcheck import TOL, directional_check, f64


def test_matmul_identity():
    a = Tensor([[1, 2], [3, 4]])
    np.testing.assert_array_equal(ad.matmul(a, Tensor(np.eye(2))).data, [[1, 2], [3, 4]])


def test_matmul_row_times_column():
    assert ad.matmul(Tensor([[1, 2]]), Tensor([[3], [4]])).data[0, 0] == 11


def test_matmul_annihilator():
    assert ad.matmul(Tensor([[0.0]]), Tensor([[7.5]])).data[0, 0] == 0


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(1, 2\).*\(3, 1\)"):
        ad.matmul(Tensor([[1, 2]]), Tensor([[1], [2], [3]]))


def test_matmul_gradients():
    a, b = f64([[1.0, 2.0]]), f64([[3.0], [4.0]])
    ad.matmul(a, b).backward()
    np.testing.assert_array_equal(a.grad, [[3, 4]])
    np.testing.assert_array_equal(b.grad, [[1], [2]])


def test_elementwise():
    np.testing.assert_array_equal(ad.elementwise(Tensor([1, 2, 3]), Tensor([0, 0, 0]), "mul").data, [[0, 0, 0]])
    x = Tensor([1.5, -2.0])
    np.testing.assert_array_equal(ad.elementwise(x, Tensor([0, 0]), "add").data, x.data)
    np.testing.assert_array_equal(ad.elementwise(Tensor([2, 3]), Tensor([4, 5]), "mul").data, [[8, 15]])
    with pytest.raises(ShapeError):
        ad.mul(Tensor([1, 2]), Tensor([1, 2, 3]))
    with pytest.raises(ValueError):
        ad.elementwise(x, x, "sub")


def test_mul_gradient_is_other_operand():
    a, b = f64([2.0, 3.0]), f64([4.0, 5.0])
    ad.sum_all(ad.mul(a, b)).backward()
    np.testing.assert_array_equal(a.grad, [[4, 5]])


def test_activations():
    np.testing.assert_array_equal(ad.relu(Tensor([-1, 0, 2])).data, [[0, 0, 2]])
    assert ad.sigmoid(Tensor([0.0])).data[0, 0] == 0.5
    assert ad.sigmoid(f64([math.log(3)])).data[0, 0] == pytest.approx(0.75, abs=1e-15)
    assert ad.activation(Tensor([-3.0]), "relu").data[0, 0] == 0


def test_relu_gradient_at_zero_is_zero():
    x = f64([0.0, 1.0, -1.0])
    ad.sum_all(ad.relu(x)).backward()
    np.testing.assert_array_equal(x.grad, [[0, 1, 0]])


def test_sigmoid_extremes_are_finite():
    out = ad.sigmoid(Tensor([-1e4, 1e4]))
    np.testing.assert_array_equal(out.data, [[0, 1]])


def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax_rows(Tensor([[0, 0, 0]])).data, [[1 / 3] * 3], rtol=1e-6)
    np.testing.assert_array_equal(ad.softmax_rows(Tensor([[1000, 1000]])).data, [[0.5, 0.5]])
    p = ad.softmax_rows(f64([[math.log(1), math.log(2), math.log(3)]])).data
    np.testing.assert_allclose(p, [[1 / 6, 2 / 6, 3 / 6]], rtol=1e-12)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 8)),
              elements=st.floats(-1e4, 1e4, width=32)))
def test_softmax_rows_sum_to_one(x):
    p = ad.softmax_rows(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


def test_concat():
    a = Tensor([[1, 2]])
    assert ad.concat_cols([a]) is a
    np.testing.assert_array_equal(ad.concat_cols([a, Tensor([[9]])]).data, [[1, 2, 9]])
    parts = [Tensor(np.zeros((1, w))) for w in (32, 32, 32, 1088)]
    assert ad.concat_cols(parts).cols == 1184
    with pytest.raises(ShapeError):
        ad.concat_cols([Tensor(np.zeros((1, 2))), Tensor(np.zeros((2, 2)))])


def test_concat_backward_splits_by_width():
    a, b = f64([[1.0, 2.0]]), f64([[3.0]])
    w = f64([[10.0, 20.0, 30.0]])
    ad.sum_all(ad.mul(ad.concat_cols([a, b]), w)).backward()
    np.testing.assert_array_equal(a.grad, [[10, 20]])
    np.testing.assert_array_equal(b.grad, [[30]])


def test_dropout_identities():
    rng = np.random.default_rng(0)
    x = Tensor(np.arange(6.0).reshape(2, 3))
    assert ad.dropout(x, 0.0, True, rng) is x
    assert ad.dropout(x, 0.2, False, rng) is x
    with pytest.raises(ValueError):
        ad.dropout(x, 1.0, True, rng)
    with pytest.raises(ValueError):
        ad.dropout(x, -0.1, True, rng)


def test_dropout_preserves_mean():
    rng = np.random.Generator(np.random.Philox(5))
    x = Tensor(np.ones((100, 1000)))
    y = ad.dropout(x, 0.5, True, rng).data
    assert abs(y.mean() - 1.0) < 0.05
    assert set(np.unique(y)) == {0.0, 2.0}


def test_backward_square():
    w = f64([3.0])
    ad.sum_all(ad.mul(w, w)).backward()
    assert w.grad[0, 0] == 6.0


def test_unused_parameter_gets_zero_grad():
    w, unused = f64([3.0]), f64([1.0, 2.0])
    unused.zero_grad()
    ad.sum_all(ad.mul(w, w)).backward()
    np.testing.assert_array_equal(unused.grad, [[0, 0]])


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        ad.mul(f64([1.0, 2.0]), f64([1.0, 2.0])).backward()


def test_gradients_accumulate_across_calls():
    w = f64([2.0])
    ad.sum_all(ad.mul(w, w)).backward()
    ad.sum_all(ad.mul(w, w)).backward()
    assert w.grad[0, 0] == 8.0


def test_graph_is_topologically_ordered():
    a = f64([[1.0, 2.0]])
    b = ad.relu(a)
    c = ad.mul(b, a)
    loss = ad.sum_all(ad.add(c, b))
    nodes = ComputeGraph.from_output(loss).nodes
    pos = {id(n): i for i, n in enumerate(nodes)}
    for n in nodes:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]
    assert nodes[-1] is loss


def test_non_finite_forward_is_an_error():
    with pytest.raises(FloatingPointError), np.errstate(over="ignore"):
        ad.mul(Tensor([np.float32(1e30)]), Tensor([np.float32(1e30)]))


def test_no_grad_records_nothing():
    w = f64([1.0])
    with ad.no_grad():
        out = ad.mul(w, w)
    assert not out.requires_grad and out._parents == ()


# ------------------------------------------------------------ finite differences

OP_CASES = {
    "matmul": lambda a, b, c, bias: ad.matmul(a, b),
    "mul": lambda a, b, c, bias: ad.mul(a, c),
    "add": lambda a, b, c, bias: ad.add(a, c),
    "add_row": lambda a, b, c, bias: ad.add_row(ad.matmul(a, b), bias),
    "linear": lambda a, b, c, bias: ad.linear(a, b, bias),
    "relu": lambda a, b, c, bias: ad.relu(a),
    "sigmoid": lambda a, b, c, bias: ad.sigmoid(a),
    "softmax": lambda a, b, c, bias: ad.softmax_rows(a),
    "concat": lambda a, b, c, bias: ad.concat_cols([a, c]),
    "scale": lambda a, b, c, bias: ad.scale(a, -2.5),
    "gather": lambda a, b, c, bias: ad.gather_rows(a, np.array([0, a.rows - 1, 0])),
}


@pytest.mark.parametrize("op", sorted(OP_CASES))
@pytest.mark.parametrize("seed", range(20))
def test_op_gradients_match_finite_differences(op, seed):
    rng = np.random.default_rng(seed)
    r, k, c = rng.integers(1, 9, size=3)
    params = {
        "a": f64(rng.standard_normal((r, k))),
        "b": f64(rng.standard_normal((k, c))),
        "c": f64(rng.standard_normal((r, k))),
        "bias": f64(rng.standard_normal((1, c))),
    }
    out_shape = OP_CASES[op](*params.values()).shape
    probe = Tensor(rng.standard_normal(out_shape), dtype=np.float64)

    def loss():
        return ad.sum_all(ad.mul(OP_CASES[op](*params.values()), probe))

    errs = directional_check(loss, params, rng)
    assert max(errs.values()) < TOL, errs


@pytest.mark.parametrize("seed", range(20))
def test_fused_op_gradients(seed):
    rng = np.random.default_rng(100 + seed)
    bsz, n, d, slots = rng.integers(1, 6), rng.integers(1, 5), rng.integers(1, 8), rng.integers(0, 5)
    gates = f64(rng.standard_normal((bsz, n)))
    experts = [f64(rng.standard_normal((bsz, d))) for _ in range(n)]
    q = f64(rng.standard_normal((bsz, d)))
    k = f64(rng.standard_normal((bsz * slots, d)))
    v = f64(rng.standard_normal((bsz * slots, d)))
    lengths = rng.integers(0, slots + 1, size=bsz)
    w = f64(rng.standard_normal((d, 3)))
    bias = f64(rng.standard_normal((1, 3)))
    labels = rng.integers(0, 3, size=bsz)
    weights = rng.random(bsz)
    R1 = Tensor(rng.standard_normal((bsz, d)), dtype=np.float64)
    R2 = Tensor(rng.standard_normal((bsz, d)), dtype=np.float64)

    def loss():
        mix = ad.mixture(ad.softmax_rows(gates), experts)
        att = ad.attention(q, k, v, lengths)
        probs = ad.softmax_rows(ad.linear(ad.add(mix, att), w, bias))
        ce = ad.cross_entropy(probs, labels, weights)
        return ad.add(ce, ad.add(ad.sum_all(ad.mul(mix, R1)), ad.sum_all(ad.mul(att, R2))))

    params = {"gates": gates, "q": q, "w": w, "bias": bias, **{f"e{i}": e for i, e in enumerate(experts)}}
    if slots:
        params.update(k=k, v=v)
    errs = directional_check(loss, params, rng)
    assert max(errs.values()) < TOL, errs


def test_add_row_and_stop_gradient():
    a = f64([[1.0, 2.0], [3.0, 4.0]])
    row = f64([[10.0, 20.0]])
    out = ad.add_row(ad.stop_gradient(a), row)
    np.testing.assert_array_equal(out.data, [[11, 22], [13, 24]])
    ad.sum_all(out).backward()
    np.testing.assert_array_equal(row.grad, [[2, 2]])
    assert a.grad is None


# ------------------------------------------------------------ optimizer


def test_adam_zero_gradient_leaves_parameter():
    w = f64([1.5, -2.0])
    w.zero_grad()
    opt = Adam({"w": w}, lr=0.1)
    opt.step()
    np.testing.assert_array_equal(w.data, [[1.5, -2.0]])


def test_adam_descends():
    w = f64([1.0])
    opt = Adam({"w": w}, lr=0.1)
    ad.sum_all(ad.mul(w, w)).backward()
    opt.step()
    assert w.data[0, 0] < 1.0
    assert opt.step_count == 1
    np.testing.assert_array_equal(w.grad, [[0.0]])


def test_adam_converges_on_quadratic():
    w = f64([0.0])
    three = Tensor([3.0], dtype=np.float64)
    opt = Adam({"w": w}, lr=0.1)
    for _ in range(1000):
        diff = ad.add(w, ad.scale(three, -1.0))
        ad.sum_all(ad.mul(diff, diff)).backward()
        opt.step()
    assert abs(w.data[0, 0] - 3.0) < 0.01


def test_adam_flushes_subnormal_moments():
    # one entry gets a gradient once, then decays towards zero
    w = Tensor(np.ones((1, 2)), requires_grad=True)
    opt = Adam({"w": w}, lr=1e-3)
    tiny = np.finfo(np.float32).tiny
    for step in range(2000):
        w.grad = np.array([[1.0 if step == 0 else 0.0, 1.0]], dtype=np.float32)
        opt.step()
    for state in (opt.m["w"], opt.v["w"]):
        col = state[0, 0]
        assert col == 0 or abs(col) >= tiny
    assert opt.m["w"][0, 1] != 0


def test_adam_missing_gradient_names_parameter():
    opt = Adam({"tower.w": Tensor([1.0], requires_grad=True)})
    with pytest.raises(ValueError, match="tower.w"):
        opt.step()


def test_adam_is_deterministic():
    def run():
        rng = np.random.default_rng(3)
        w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        x = Tensor(rng.standard_normal((5, 4)))
        opt = Adam({"w": w}, lr=0.01)
        for _ in range(50):
            ad.sum_all(ad.relu(ad.matmul(x, w))).backward()
            opt.step()
        return w.data.tobytes()

    assert run() == run()
