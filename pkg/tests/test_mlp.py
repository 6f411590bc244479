import numpy as np
import pytest

from deltadiff.mlp import (
    DimensionError,
    MlpModel,
    MlpSpec,
    init_model,
    layer_matrix,
    loss_eval,
    loss_vector,
    mlp_backward,
    mlp_forward,
    model_checksum,
    softmax,
    unpack_layer_matrix,
)
from deltadiff.optim import AdamState, adam_step
from deltadiff.rng import RngStream

from helpers import check_grads, random_coords


def _identity_linear_model():
    spec = MlpSpec((2, 2), output_head="linear-regressor")
    return MlpModel(spec, [(np.eye(2), np.zeros(2))])


def test_forward_identity_layer():
    trace = mlp_forward(_identity_linear_model(), np.array([1.0, 2.0]))
    assert np.array_equal(trace.output, np.array([1.0, 2.0]))


def test_forward_softmax_symmetry():
    spec = MlpSpec((4, 10))
    model = MlpModel(spec, [(np.zeros((10, 4)), np.zeros(10))])
    trace = mlp_forward(model, np.ones(4))
    assert np.allclose(trace.output, 0.1, atol=1e-15)


def test_forward_matches_handrolled_reference():
    # Independent straight-line evaluation of a random 2-layer tanh net.
    rng = RngStream(11, 0)
    spec = MlpSpec((3, 5, 2), hidden_activation="tanh", output_head="linear-regressor")
    model = init_model(spec, rng)
    x = rng.gaussian(3)
    (W0, b0), (W1, b1) = model.weights
    expected = W1 @ np.tanh(W0 @ x + b0) + b1
    got = mlp_forward(model, x).output
    assert np.max(np.abs(got - expected)) < 1e-12


def test_forward_shape_error_names_layer():
    model = _identity_linear_model()
    with pytest.raises(DimensionError, match="layer 0"):
        mlp_forward(model, np.ones(3))


def test_backward_zero_grad_output():
    rng = RngStream(5, 1)
    model = init_model(MlpSpec((3, 4, 2)), rng)
    trace = mlp_forward(model, rng.gaussian(3))
    grads = mlp_backward(model, trace, np.zeros(2))
    for dW, db in grads:
        assert not dW.any() and not db.any()


def test_backward_linear_closed_form():
    # Squared loss on a 1-output linear model: d/dW ||Wx - y||^2 = 2(Wx-y)x^T.
    spec = MlpSpec((3, 1), output_head="linear-regressor")
    W = np.array([[0.5, -1.0, 2.0]])
    model = MlpModel(spec, [(W, np.zeros(1))])
    x = np.array([1.0, 2.0, -0.5])
    y = np.array([0.7])
    trace = mlp_forward(model, x)
    loss, grad_out = loss_eval("MSE", trace.output, y)
    (dW, db), = mlp_backward(model, trace, grad_out)
    resid = W @ x - y
    assert np.allclose(dW, 2.0 * np.outer(resid, x), atol=1e-14)
    assert np.allclose(db, 2.0 * resid, atol=1e-14)


@pytest.mark.parametrize("head,act", [
    ("softmax-classifier", "tanh"),
    ("softmax-classifier", "relu"),
    ("linear-regressor", "tanh"),
])
def test_backward_matches_finite_differences(head, act):
    rng = RngStream(7, 3)
    spec = MlpSpec((4, 6, 5, 3), hidden_activation=act, output_head=head)
    model = init_model(spec, rng)
    x = rng.gaussian(4)
    target = 1 if head == "softmax-classifier" else rng.gaussian(3)
    kind = "softmax-CE" if head == "softmax-classifier" else "MSE"

    def loss_fn():
        t = mlp_forward(model, x)
        return loss_eval(kind, t.logits, target)[0]

    trace = mlp_forward(model, x)
    _, grad_out = loss_eval(kind, trace.logits, target)
    grads = mlp_backward(model, trace, grad_out)
    arrays = model.param_list()
    flat_grads = []
    for dW, db in grads:
        flat_grads.extend([dW, db])
    coords = random_coords(np.random.default_rng(0), arrays, 20)
    check_grads(loss_fn, arrays, flat_grads, coords, rel_tol=1e-6)


def test_backward_restricted_to_one_layer():
    rng = RngStream(9, 0)
    model = init_model(MlpSpec((3, 4, 2)), rng)
    x = rng.gaussian(3)
    trace = mlp_forward(model, x)
    _, grad_out = loss_eval("softmax-CE", trace.logits, 0)
    full = mlp_backward(model, trace, grad_out)
    only1 = mlp_backward(model, trace, grad_out, layer=1)
    assert only1[0] is None
    assert np.allclose(only1[1][0], full[1][0])
    only0 = mlp_backward(model, trace, grad_out, layer=0)
    assert only0[1] is None
    assert np.allclose(only0[0][0], full[0][0])


def test_backward_stale_trace_rejected():
    rng = RngStream(9, 1)
    model = init_model(MlpSpec((3, 4, 2)), rng)
    other = init_model(MlpSpec((3, 5, 2)), rng)
    trace = mlp_forward(other, rng.gaussian(3))
    with pytest.raises(DimensionError):
        mlp_backward(model, trace, np.zeros(2))


def test_ce_uniform_logits():
    loss, _ = loss_eval("softmax-CE", np.zeros(10), 3)
    assert abs(loss - np.log(10.0)) < 1e-12


def test_ce_probabilities_sum_to_one():
    logits = RngStream(1, 2).gaussian(10) * 5
    assert abs(softmax(logits).sum() - 1.0) < 1e-12


def test_ce_gradient_is_softmax_minus_onehot():
    logits = np.array([0.2, -1.0, 3.0])
    _, grad = loss_eval("softmax-CE", logits, 2)
    onehot = np.array([0.0, 0.0, 1.0])
    assert np.allclose(grad, softmax(logits) - onehot, atol=1e-14)


def test_ce_label_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        loss_eval("softmax-CE", np.zeros(3), 5)


def test_mse_identical_vectors():
    v = np.array([1.0, -2.0, 0.5])
    loss, grad = loss_eval("MSE", v, v.copy())
    assert loss == 0.0
    assert not grad.any()


def test_loss_vector_matches_loss_eval():
    rng = RngStream(4, 4)
    outs = rng.gaussian((6, 3))
    per_row = loss_vector("softmax-CE", outs, 1)
    singles = [loss_eval("softmax-CE", outs[i], 1)[0] for i in range(6)]
    assert np.allclose(per_row, singles, atol=1e-12)


def test_adam_zero_gradient_keeps_params():
    p = [np.array([1.0, 2.0]), np.array([[3.0]])]
    st = AdamState.for_params(p)
    adam_step(st, p, [np.zeros(2), np.zeros((1, 1))], lr=0.1)
    assert np.array_equal(p[0], [1.0, 2.0])
    assert st.t == 1


def test_adam_first_step_magnitude():
    # Hand derivation for step 1 of bias-corrected Adam:
    # m_hat = g, v_hat = g^2, update = lr * g / (|g| + eps).
    g = np.array([0.001, -0.25, 3.0])
    p = [np.zeros(3)]
    st = AdamState.for_params(p)
    adam_step(st, p, [g.copy()], lr=0.01)
    expected = -0.01 * g / (np.abs(g) + st.eps)
    assert np.allclose(p[0], expected, rtol=1e-12)
    # For |g| >> eps the magnitude is lr itself.
    assert np.allclose(np.abs(p[0]), 0.01, rtol=1e-5)


def test_adam_deterministic():
    def run():
        p = [np.ones(4)]
        st = AdamState.for_params(p)
        for k in range(5):
            adam_step(st, p, [np.full(4, 0.1 * (k + 1))], lr=0.05)
        return p[0]

    assert np.array_equal(run(), run())


def test_adam_rejects_nonfinite():
    p = [np.zeros(2)]
    st = AdamState.for_params(p)
    with pytest.raises(FloatingPointError, match="tensor 0"):
        adam_step(st, p, [np.array([np.nan, 1.0])], lr=0.1)


def test_layer_matrix_roundtrip():
    rng = RngStream(6, 6)
    W = rng.gaussian((5, 3))
    b = rng.gaussian(5)
    M = layer_matrix(W, b)
    assert M.shape == (4, 5)
    W2, b2 = unpack_layer_matrix(M)
    assert np.array_equal(W, W2) and np.array_equal(b, b2)


def test_checksum_sensitive_to_weights():
    rng = RngStream(8, 8)
    model = init_model(MlpSpec((2, 3, 2)), rng)
    c1 = model_checksum(model)
    model.weights[0][0][0, 0] += 1e-12
    assert model_checksum(model) != c1
