import numpy as np
import pytest

from fedsim import autodiff as ad
from fedsim.errors import LogDomain, NoTape, NotScalar, ShapeMismatch

from oracles import naive_matmul, numeric_grad, rel_err


def test_matmul_identity():
    out = ad.matmul(np.eye(2), [[3.0], [4.0]])
    assert np.array_equal(out.data, [[3.0], [4.0]])


def test_relu_definition():
    out = ad.relu([-1.0, 0.0, 2.0])
    assert np.array_equal(out.data, [0.0, 0.0, 2.0])


def test_matmul_against_naive_oracle():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(4, 2))
    assert np.max(np.abs(ad.matmul(a, b).data - naive_matmul(a, b))) < 1e-12


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_elementwise_rejects_general_broadcast():
    with pytest.raises(ShapeMismatch):
        ad.add(np.ones((2, 3)), np.ones((1, 3)))


def test_scalar_broadcast_allowed():
    out = ad.mul(np.ones((2, 2)), ad.Tensor(3.0))
    assert np.array_equal(out.data, np.full((2, 2), 3.0))


def test_log_domain_error():
    with pytest.raises(LogDomain):
        ad.log([1.0, 0.0])


def test_backward_square_sum():
    x0 = ad.Tensor([1.0, 2.0, 3.0])
    with ad.GradTape() as tape:
        x = tape.watch(x0)
        loss = ad.sum(ad.mul(x, x))
        grads = ad.backward(loss)
    assert np.array_equal(grads[x].data, [2.0, 4.0, 6.0])


def test_backward_scale_linearity():
    x0 = ad.Tensor([5.0, -1.0, 0.5])
    with ad.GradTape() as tape:
        x = tape.watch(x0)
        grads = ad.backward(ad.sum(ad.scale(x, 2.5)))
    assert np.array_equal(grads[x].data, np.full(3, 2.5))


def test_backward_requires_scalar():
    with ad.GradTape() as tape:
        x = tape.watch(ad.Tensor([1.0, 2.0]))
        y = ad.mul(x, x)
        with pytest.raises(NotScalar):
            ad.backward(y)


def test_backward_requires_tape():
    with pytest.raises(NoTape):
        ad.backward(ad.Tensor(1.0))


def test_tape_single_use():
    with ad.GradTape() as tape:
        x = tape.watch(ad.Tensor([1.0]))
        ad.backward(ad.sum(x))
        with pytest.raises(NoTape):
            ad.backward(ad.sum(x))


def test_unreachable_param_gets_zero_grad():
    with ad.GradTape() as tape:
        x = tape.watch(ad.Tensor([1.0, 2.0]))
        unused = tape.watch(ad.Tensor([[3.0, 4.0]]))
        grads = ad.backward(ad.sum(x))
    assert np.array_equal(grads[unused].data, np.zeros((1, 2)))
    assert grads[unused].shape == (1, 2)


def test_sgd_step_basics():
    with ad.GradTape() as tape:
        p = tape.watch(ad.Tensor(1.0))
        grads = ad.backward(ad.scale(p, 2.0))
    (updated,) = ad.sgd_step([p], grads, 0.01)
    assert updated.item() == pytest.approx(0.98, abs=0)

    with ad.GradTape() as tape:
        p = tape.watch(ad.Tensor(1.0))
        q = tape.watch(ad.Tensor(7.0))
        grads = ad.backward(ad.sum(ad.mul(q, q)))
    (updated,) = ad.sgd_step([p], grads, 0.1)  # zero gradient
    assert updated.item() == 1.0


def test_sgd_converges_on_quadratic():
    # f(w) = (w - 3)^2, eta = 0.1: |w_t - 3| = 0.8^t * 3
    w = ad.Tensor(0.0)
    for _ in range(100):
        with ad.GradTape() as tape:
            wt = tape.watch(w)
            diff = ad.sub(wt, ad.Tensor(3.0))
            grads = ad.backward(ad.mul(diff, diff))
            (w,) = ad.sgd_step([wt], grads, 0.1)
    assert abs(w.item() - 3.0) < 1e-6
    assert abs(w.item() - 3.0) == pytest.approx(0.8 ** 100 * 3.0, rel=1e-6)


def _mlp_ce_loss(arrays: list[np.ndarray]) -> float:
    """Plain numpy 2-layer MLP + cross-entropy, for finite differencing."""
    w1, b1, w2, b2 = arrays
    x = _MLP_X
    h = np.maximum(x @ w1 + b1, 0.0)
    logits = h @ w2 + b2
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return float(-logp[np.arange(len(_MLP_Y)), _MLP_Y].mean())


_MLP_RNG = np.random.default_rng(11)
_MLP_X = _MLP_RNG.normal(size=(4, 3))
_MLP_Y = np.array([0, 2, 1, 2])


def test_mlp_cross_entropy_matches_finite_differences():
    w1 = _MLP_RNG.normal(size=(3, 5)) * 0.7
    b1 = _MLP_RNG.normal(size=(1, 5)) * 0.1
    w2 = _MLP_RNG.normal(size=(5, 3)) * 0.7
    b2 = _MLP_RNG.normal(size=(1, 3)) * 0.1
    arrays = [w1, b1, w2, b2]
    ones = ad.Tensor(np.ones((4, 1)))

    with ad.GradTape() as tape:
        tw1, tb1, tw2, tb2 = (tape.watch(ad.Tensor(a)) for a in arrays)
        h = ad.relu(ad.add(ad.matmul(ad.Tensor(_MLP_X), tw1), ad.matmul(ones, tb1)))
        logits = ad.add(ad.matmul(h, tw2), ad.matmul(ones, tb2))
        # log-sum-exp with a detached per-row max
        m = logits.data.max(axis=1, keepdims=True)
        shifted = ad.sub(logits, ad.Tensor(np.broadcast_to(m, logits.shape)))
        rowsum = ad.matmul(ad.exp(shifted), ad.Tensor(np.ones((3, 1))))
        lse = ad.add(ad.log(rowsum), ad.Tensor(m))
        onehot = np.zeros((4, 3))
        onehot[np.arange(4), _MLP_Y] = 1.0
        picked = ad.sum(ad.mul(logits, ad.Tensor(onehot)))
        loss = ad.scale(ad.sub(ad.sum(lse), picked), 1.0 / 4)
        grads = ad.backward(loss)
        params = [tw1, tb1, tw2, tb2]

    assert loss.item() == pytest.approx(_mlp_ce_loss(arrays), abs=1e-12)
    numeric = numeric_grad(_mlp_ce_loss, arrays)
    for p, n in zip(params, numeric):
        assert rel_err(grads[p].data, n) < 1e-4


def _random_graph_loss(kind: str, arrays: list[np.ndarray], as_tensors=None) -> float:
    """Scalar graph that routes through one primitive kind; numpy or tracked."""
    t = as_tensors if as_tensors is not None else [ad.Tensor(a) for a in arrays]
    if kind == "matmul":
        out = ad.matmul(t[0], t[1])
    elif kind in ("add", "sub", "mul"):
        out = getattr(ad, kind)(t[0], t[1])
    elif kind == "relu":
        out = ad.relu(t[0])
    elif kind == "scale":
        out = ad.scale(t[0], 1.7)
    elif kind == "sum":
        return ad.sum(t[0])
    elif kind == "mean":
        return ad.mean(t[0])
    elif kind == "exp":
        out = ad.exp(t[0])
    elif kind == "log":
        out = ad.log(ad.add(ad.mul(t[0], t[0]), ad.Tensor(np.full(t[0].shape, 0.5))))
    elif kind == "concat_rows":
        out = ad.concat_rows([t[0], t[1]])
    elif kind == "l2_norm":
        return ad.l2_norm(t[0])
    else:
        raise AssertionError(kind)
    return ad.mean(ad.mul(out, out))


@pytest.mark.parametrize("kind", ad.PRIMITIVE_KINDS)
def test_finite_difference_every_primitive(kind):
    rng = np.random.default_rng(hash(kind) % (2**32))
    if kind == "matmul":
        arrays = [rng.normal(size=(3, 4)), rng.normal(size=(4, 2))]
    elif kind == "concat_rows":
        arrays = [rng.normal(size=(2, 3)), rng.normal(size=(3, 3))]
    elif kind in ("add", "sub", "mul"):
        arrays = [rng.normal(size=(3, 3)), rng.normal(size=(3, 3))]
    elif kind == "relu":
        # keep away from the kink at zero
        arrays = [rng.normal(size=(3, 3)) + np.sign(rng.normal(size=(3, 3))) * 0.3]
    else:
        arrays = [rng.normal(size=(3, 3))]

    with ad.GradTape() as tape:
        tracked = [tape.watch(ad.Tensor(a)) for a in arrays]
        loss = _random_graph_loss(kind, arrays, as_tensors=tracked)
        grads = ad.backward(loss)

    def f(bumped):
        return float(_random_graph_loss(kind, bumped).item())

    numeric = numeric_grad(f, arrays)
    for p, n in zip(tracked, numeric):
        assert rel_err(grads[p].data, n) < 1e-4, kind


def test_backward_linearity():
    rng = np.random.default_rng(23)
    x0 = ad.Tensor(rng.normal(size=(4, 4)))
    a, b = 1.3, -0.4

    def losses(x):
        l1 = ad.mean(ad.mul(x, x))
        l2 = ad.sum(ad.relu(x))
        return l1, l2

    with ad.GradTape() as tape:
        x = tape.watch(x0)
        l1, _ = losses(x)
        g1 = ad.backward(l1)[x].data
    with ad.GradTape() as tape:
        x = tape.watch(x0)
        _, l2 = losses(x)
        g2 = ad.backward(l2)[x].data
    with ad.GradTape() as tape:
        x = tape.watch(x0)
        l1, l2 = losses(x)
        combined = ad.add(ad.scale(l1, a), ad.scale(l2, b))
        gc = ad.backward(combined)[x].data

    assert np.max(np.abs(gc - (a * g1 + b * g2))) < 1e-10


def test_determinism_bit_identical():
    def run():
        rng = np.random.default_rng(99)
        x0 = ad.Tensor(rng.normal(size=(5, 5)))
        with ad.GradTape() as tape:
            x = tape.watch(x0)
            y = ad.exp(ad.scale(ad.mul(x, x), -0.5))
            loss = ad.mean(ad.matmul(y, y))
            grads = ad.backward(loss)
        return loss.data.tobytes(), grads[x].data.tobytes()

    assert run() == run()


def test_apply_primitive_dispatch():
    out = ad.apply_primitive("scale", [ad.Tensor([2.0])], c=3.0)
    assert out.data[0] == 6.0
    out = ad.apply_primitive("concat_rows",
                             [ad.Tensor([[1.0]]), ad.Tensor([[2.0]])])
    assert out.shape == (2, 1)


def test_outputs_finite_on_finite_inputs():
    rng = np.random.default_rng(5)
    x = ad.Tensor(rng.normal(size=(4, 4)))
    for kind in ("add", "sub", "mul", "relu", "exp"):
        out = ad.apply_primitive(kind, [x, x][: 2 if kind in ("add", "sub", "mul") else 1])
        assert np.all(np.isfinite(out.data))
