import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from predsens import autodiff as ad
from predsens.sensitivity import abs_jacobian

from conftest import FROZEN, central_diff_jacobian, oracle_model, predict_values, random_text_model, rel_err, unhex


def test_softmax_of_zeros_is_uniform():
    out = ad.forward(lambda x: ad.softmax(x), [np.zeros(2)])
    assert out.data.tolist() == [0.5, 0.5]


def test_sigmoid_at_zero():
    assert ad.forward(ad.sigmoid, [np.zeros(1)]).data[0] == 0.5


def test_identity_matmul():
    v = np.array([[1.5], [-2.0], [0.25]])
    out = ad.forward(lambda x: ad.matmul(np.eye(3), x), [v])
    assert np.array_equal(out.data, v)


def test_sigmoid_derivative_at_zero():
    out = ad.forward(ad.sigmoid, [np.zeros(1)])
    assert ad.grad(out, 0)[0] == 0.25


def test_constant_graph_has_zero_gradient():
    out = ad.forward(lambda x: x.tape.constant(np.array([1.0, 2.0])) * 3.0, [np.ones(4)])
    g = ad.grad(out, 1)
    assert g.shape == (4,) and not g.any()


def test_two_layer_net_matches_finite_differences(rng):
    model = random_text_model(rng, dim=4, hidden=(5,), k=3)
    x = rng.normal(size=(3, 4))
    jac = ad.jacobian(ad.forward(model.graph, [x]))
    fd = central_diff_jacobian(lambda z: predict_values(model, z), x)
    assert rel_err(jac, fd) <= 1e-4


# -- every primitive against central differences -------------------------------

def _pos(rng, shape=(4,)):
    return rng.uniform(0.5, 2.0, shape)


def _away_from_zero(rng, shape=(4,)):
    return rng.choice([-1.0, 1.0], shape) * rng.uniform(0.2, 2.0, shape)


PRIMITIVES = {
    "add": (lambda x: ad.add(x, np.arange(3.0)), lambda r: r.normal(size=(2, 3))),
    "add_broadcast": (lambda x: ad.add(x, x.tape.constant(np.ones((4, 2, 3)))), lambda r: r.normal(size=(2, 3))),
    "sub": (lambda x: ad.sub(2.0, x), lambda r: r.normal(size=(3,))),
    "mul": (lambda x: ad.mul(x, x), lambda r: r.normal(size=(2, 3))),
    "matmul": (lambda x: ad.matmul(x, ad.reshape(x, (3, 2))), lambda r: r.normal(size=(2, 3))),
    "matmul_batched": (lambda x: ad.matmul(x, np.ones((3, 2))), lambda r: r.normal(size=(4, 2, 3))),
    "neg": (ad.neg, lambda r: r.normal(size=(3,))),
    "sigmoid": (ad.sigmoid, lambda r: r.normal(scale=3, size=(4,))),
    "tanh": (ad.tanh, lambda r: r.normal(size=(4,))),
    "relu": (ad.relu, _away_from_zero),
    "exp": (ad.exp, lambda r: r.normal(size=(4,))),
    "log": (ad.log, _pos),
    "sqrt": (ad.sqrt, _pos),
    "abs": (ad.abs, _away_from_zero),
    "softmax": (lambda x: ad.softmax(x, axis=-1), lambda r: r.normal(size=(2, 4))),
    "softmax_axis0": (lambda x: ad.softmax(x, axis=0), lambda r: r.normal(size=(3, 2))),
    "log_softmax": (lambda x: ad.log_softmax(x, axis=-1), lambda r: r.normal(size=(2, 4))),
    "sum": (lambda x: ad.sum(x * x, axis=1), lambda r: r.normal(size=(2, 3))),
    "sum_all": (lambda x: ad.sum(ad.exp(x)), lambda r: r.normal(size=(2, 3))),
    "mean": (lambda x: ad.mean(x * x, axis=0, keepdims=True), lambda r: r.normal(size=(3, 2))),
    "reshape": (lambda x: ad.reshape(x, (6,)) * np.arange(6.0), lambda r: r.normal(size=(2, 3))),
    "take": (lambda x: ad.take(x, [2, 0, 2]) * 1.5, lambda r: r.normal(size=(3, 2))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    op, draw = PRIMITIVES[name]
    worst = 0.0
    for seed in range(100):
        r = np.random.default_rng(seed)
        x = draw(r)
        out = ad.forward(lambda t: ad.reshape(op(t), (-1,)), [x])
        jac = ad.jacobian(out)
        fd = central_diff_jacobian(lambda z: ad.forward(lambda t: ad.reshape(op(t), (-1,)), [z]).data, x)
        worst = max(worst, rel_err(jac, fd))
    assert worst <= 1e-4, f"{name}: max relative error {worst:.2e}"


# -- invariants ----------------------------------------------------------------

@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.integers(1, 12), elements=st.floats(-50, 50)))
def test_softmax_is_a_simplex(z):
    p = ad.forward(ad.softmax, [z]).data
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p >= 0) and np.all(p <= 1)


def test_softmax_strictly_inside_unit_interval_for_moderate_logits(rng):
    for _ in range(50):
        p = ad.forward(ad.softmax, [rng.normal(scale=5, size=6)]).data
        assert np.all(p > 0) and np.all(p < 1)


def test_abs_jacobian_is_non_negative(rng):
    for _ in range(20):
        model = random_text_model(rng, dim=3, hidden=(4,), k=3)
        assert np.all(abs_jacobian(model, rng.normal(size=(4, 3))) >= 0)


def test_forward_backward_is_bitwise_deterministic(rng):
    model = random_text_model(rng, dim=5, hidden=(6, 4), k=4)
    x = rng.normal(size=(5, 5))
    a = ad.jacobian(ad.forward(model.graph, [x]))
    b = ad.jacobian(ad.forward(model.graph, [x]))
    assert a.tobytes() == b.tobytes()


def test_tape_is_topological_and_backward_visits_each_node_once(rng):
    model = random_text_model(rng, dim=3, hidden=(4,), k=2)
    out = ad.forward(model.graph, [rng.normal(size=(3, 3))])
    tape = out.tape
    assert all(p < i for i, node in enumerate(tape.nodes) for p in node.parents)
    calls = []
    for i, node in enumerate(tape.nodes):
        if node.backward is not None:
            node.backward = (lambda f, i: lambda g: (calls.append(i), f(g))[1])(node.backward, i)
    ad.grad(out, 0)
    assert len(calls) == len(set(calls))


# -- errors --------------------------------------------------------------------

def test_shape_mismatch_names_the_op():
    with pytest.raises(ad.DimensionError, match="matmul"):
        ad.forward(lambda x: ad.matmul(x, np.ones((4, 2))), [np.ones((2, 3))])
    with pytest.raises(ad.DimensionError, match="add"):
        ad.forward(lambda x: ad.add(x, np.ones(4)), [np.ones(3)])


def test_class_index_out_of_range():
    out = ad.forward(ad.softmax, [np.zeros(3)])
    with pytest.raises(IndexError):
        ad.grad(out, 3)


def test_backward_before_forward():
    tape = ad.Tape()
    orphan = ad.Tensor(np.zeros(1), tape, 0)
    with pytest.raises(ad.TapeError):
        ad.grad(orphan, 0)


def test_non_finite_values_abort_the_op():
    with pytest.raises(ad.NumericalError, match="log"):
        ad.forward(ad.log, [np.array([1.0, -1.0])])
    with pytest.raises(ad.NumericalError, match="exp"):
        ad.forward(ad.exp, [np.array([1000.0])])
    with pytest.raises(ad.NumericalError):
        ad.forward(ad.sigmoid, [np.array([np.nan])])


def test_operands_from_different_tapes_are_rejected():
    a = ad.Tape().variable(np.ones(2))
    b = ad.Tape().variable(np.ones(2))
    with pytest.raises(ad.TapeError):
        ad.add(a, b)


# -- frozen oracle ---------------------------------------------------------------

@pytest.mark.parametrize("case", range(len(FROZEN["models"]["cases"])))
def test_abs_jacobian_matches_torch_oracle(case):
    entry = FROZEN["models"]["cases"][case]
    model = oracle_model("task")
    jac = abs_jacobian(model, model.embed(entry["tokens"]))
    assert np.allclose(jac, unhex(entry["abs_jacobian"]), rtol=1e-10, atol=1e-14)
    assert np.allclose(model.predict(entry["tokens"]), entry["probs"], rtol=1e-12, atol=1e-15)
