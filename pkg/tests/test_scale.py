import numpy as np
import pytest

from deltadiff.datasets import gen_blobs, split, SplitSpec
from deltadiff.mlp import MlpModel, MlpSpec, init_model, mlp_backward, mlp_forward
from deltadiff.overfit import ConditioningTuple, RecordStore, collect
from deltadiff.rng import RngStream
from deltadiff.scale import (
    LOSS_FLOOR_DB,
    ScaleModel,
    load_scale,
    save_scale,
    scale_forward,
    scale_loss,
    train_scale,
)

from helpers import check_grads, random_coords


def _synthetic_store(n, rho_fn, seed=70, d=4):
    rng = RngStream(seed, 0)
    xs = rng.gaussian((n, d))
    i_l = rng.gaussian((n, 3))
    a_l = rng.gaussian((n, 3))
    out = rng.gaussian((n, 2))
    rho = np.array([rho_fn(xs[i]) for i in range(n)])
    arrays = dict(x=xs, i_l=i_l, a_l=a_l, out=out,
                  delta_norm=np.zeros((n, 2, 2)), rho=rho,
                  loss_before=np.ones(n), loss_after=np.ones(n),
                  sample_index=np.arange(n, dtype=float))
    meta = dict(layer=0, layer_in=1, layer_out=2, delta_shape=[2, 2],
                records=n, excluded=0, steps=3, lr=0.01,
                base_checksum="synthetic", task="oracle")
    return RecordStore(arrays, meta)


def test_scale_loss_unit_values():
    for rho_s in (1.0, 0.037, 512.0):
        assert abs(scale_loss(1.1 * rho_s, rho_s) + 20.0) < 1e-12
        assert scale_loss(2.0 * rho_s, rho_s) == 0.0
        assert scale_loss(rho_s, rho_s) == LOSS_FLOOR_DB


def test_scale_loss_invariance_exact_for_pow2():
    rho_hat, rho_s = 0.7772, 0.4032
    base = scale_loss(rho_hat, rho_s)
    for c in (2.0, 0.25, 1024.0):
        assert scale_loss(c * rho_hat, c * rho_s) == base
    # General positive c agrees to floating-point accuracy.
    for c in (3.7, 0.011):
        assert abs(scale_loss(c * rho_hat, c * rho_s) - base) < 1e-12


def test_scale_loss_minimized_at_target():
    rho_s = 0.83
    grid = rho_s * np.concatenate([np.linspace(0.2, 1.8, 33), [1.0]])
    losses = [scale_loss(r, rho_s) for r in grid]
    assert np.argmin(losses) == len(grid) - 1  # exact prediction wins


def test_scale_loss_rejects_nonpositive_target():
    with pytest.raises(ValueError):
        scale_loss(1.0, 0.0)


def _zero_model(d_x=2, d_i=3, d_a=3, d_o=2):
    n_in = d_x + d_i + d_a + d_o
    spec = MlpSpec((n_in, 4, 1), output_head="linear-regressor")
    mlp = init_model(spec, RngStream(71, 0))
    for W, b in mlp.weights:
        W[:] = 0.0
        b[:] = 0.0
    return ScaleModel(mlp, np.zeros(n_in), np.ones(n_in))


def test_scale_forward_zero_weights_gives_one():
    model = _zero_model()
    cond = ConditioningTuple(np.ones(3), np.ones(3), np.ones(2))
    assert scale_forward(model, np.ones(2), cond) == 1.0


def test_scale_forward_deterministic_and_positive():
    rng = RngStream(72, 0)
    spec = MlpSpec((10, 8, 1), output_head="linear-regressor")
    model = ScaleModel(init_model(spec, rng), np.zeros(10), np.ones(10))
    cond = ConditioningTuple(rng.gaussian(3), rng.gaussian(3), rng.gaussian(2))
    x = rng.gaussian(2)
    a = scale_forward(model, x, cond)
    b = scale_forward(model, x, cond)
    assert a == b and a > 0


def test_scale_gradient_matches_finite_differences():
    # Training-path gradient: dB loss of exp(mlp(z)) w.r.t. MLP weights.
    rng = RngStream(73, 0)
    spec = MlpSpec((6, 5, 1), output_head="linear-regressor")
    mlp = init_model(spec, rng)
    z = rng.gaussian(6)
    rho_s = 0.9

    def loss_fn():
        u = mlp_forward(mlp, z).output[0]
        return scale_loss(np.exp(u), rho_s)

    trace = mlp_forward(mlp, z)
    u = trace.output[0]
    rho_hat = np.exp(u)
    dl_du = (20.0 / np.log(10.0)) / (rho_hat - rho_s) * rho_hat
    grads = mlp_backward(mlp, trace, np.array([dl_du]))
    arrays = mlp.param_list()
    flat = []
    for dW, db in grads:
        flat.extend([dW, db])
    coords = random_coords(np.random.default_rng(0), arrays, 20)
    check_grads(loss_fn, arrays, flat, coords, rel_tol=1e-6)


def test_train_constant_rho():
    store = _synthetic_store(300, lambda x: 0.73)
    model, curve = train_scale(store, hidden=(16,), epochs=120, batch=32,
                               lr=3e-3, rng=RngStream(74, 0))
    held = _synthetic_store(64, lambda x: 0.73, seed=75)
    from deltadiff.scale import _features
    preds = model.predict(_features(held.arrays["x"], held.conditioning(slice(None))))
    assert np.all(np.abs(preds / 0.73 - 1.0) < 0.10)
    assert model.rho_bar == pytest.approx(0.73)


def test_train_two_cluster_rho_classifies():
    rho_fn = lambda x: 0.05 if x[0] > 0 else 1.5
    store = _synthetic_store(600, rho_fn, seed=76)
    model, _ = train_scale(store, hidden=(32,), epochs=150, batch=32,
                           lr=3e-3, rng=RngStream(76, 1))
    held = _synthetic_store(200, rho_fn, seed=77)
    from deltadiff.scale import _features
    preds = model.predict(_features(held.arrays["x"], held.conditioning(slice(None))))
    nearest = np.where(np.abs(np.log(preds) - np.log(0.05))
                       < np.abs(np.log(preds) - np.log(1.5)), 0.05, 1.5)
    acc = np.mean(nearest == held.arrays["rho"])
    assert acc > 0.90, acc


def test_train_on_real_store_loss_decreases():
    base = init_model(MlpSpec((2, 6, 4, 3)), RngStream(78, 0))
    ds = gen_blobs(seed=79, n=200, C=3, spread=1.2)
    train, _, _ = split(ds, SplitSpec(1.0, 0.0, 0.0, seed=3))
    store = collect(base, 1, train, steps=3, lr=0.5)
    model, curve = train_scale(store, epochs=40, rng=RngStream(78, 1))
    assert np.mean(curve[-5:]) < np.mean(curve[:5])
    assert model.rho_bar == pytest.approx(store.arrays["rho"].mean())


def test_scale_roundtrip(tmp_path):
    store = _synthetic_store(100, lambda x: float(0.2 + abs(x[1])))
    model, _ = train_scale(store, hidden=(8,), epochs=10, rng=RngStream(80, 0))
    save_scale(tmp_path / "scale", model)
    loaded = load_scale(tmp_path / "scale")
    cond = store.conditioning(3)
    x = store.arrays["x"][3]
    assert scale_forward(loaded, x, cond) == scale_forward(model, x, cond)
    assert loaded.rho_bar == model.rho_bar
