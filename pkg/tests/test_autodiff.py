import numpy as np
import pytest
from helpers_fd import fd_param_check

import flowsense.autodiff as ad
from flowsense.autodiff import ParamStore, Tape, Tensor, adam_step
from flowsense.errors import ConfigError, NumericalError


def _store_with(**arrays):
    store = ParamStore()
    for name, arr in arrays.items():
        store.add(name, arr)
    return store


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return x + np.sign(x) * margin  # keeps ReLU/min/max kinks away from FD probes


# --- elementwise and arithmetic ops ---------------------------------------


@pytest.mark.parametrize(
    "opname",
    ["add", "sub", "mul", "div", "logaddexp", "minimum", "maximum"],
)
def test_binary_op_gradients(opname):
    rng = np.random.default_rng(42)
    a = _away_from_zero(rng, (5, 4))
    b = _away_from_zero(rng, (5, 4)) + 3.0  # div stays well-conditioned, no ties
    store = _store_with(a=a, b=b)
    op = getattr(ad, opname)

    def build():
        tape = Tape()
        x = store.leaf_on(tape, "a")
        y = store.leaf_on(tape, "b")
        w = tape.constant(np.linspace(0.5, 1.5, 20).reshape(5, 4))
        return ad.tsum(ad.mul(op(x, y), w))

    assert fd_param_check(build, store) < 1e-6


def test_broadcast_gradients():
    rng = np.random.default_rng(1)
    store = _store_with(mat=rng.standard_normal((6, 3)), row=rng.standard_normal(3) + 2.0)

    def build():
        tape = Tape()
        m = store.leaf_on(tape, "mat")
        r = store.leaf_on(tape, "row")
        return ad.tsum(ad.mul(ad.add(m, r), ad.div(m, r)))

    assert fd_param_check(build, store) < 1e-6


@pytest.mark.parametrize("opname", ["relu", "sigmoid", "exp", "softplus"])
def test_unary_op_gradients(opname):
    rng = np.random.default_rng(2)
    store = _store_with(x=_away_from_zero(rng, (7, 3)))
    op = getattr(ad, opname)

    def build():
        tape = Tape()
        x = store.leaf_on(tape, "x")
        w = tape.constant(np.linspace(-1, 1, 21).reshape(7, 3))
        return ad.tsum(ad.mul(op(x), w))

    assert fd_param_check(build, store) < 1e-6


def test_log_gradient():
    rng = np.random.default_rng(3)
    store = _store_with(x=rng.uniform(0.2, 3.0, (4, 4)))

    def build():
        tape = Tape()
        return ad.tsum(ad.log(store.leaf_on(tape, "x")))

    assert fd_param_check(build, store) < 1e-6


def test_matmul_gradient():
    rng = np.random.default_rng(4)
    store = _store_with(a=rng.standard_normal((5, 3)), b=rng.standard_normal((3, 4)))

    def build():
        tape = Tape()
        prod = ad.matmul(store.leaf_on(tape, "a"), store.leaf_on(tape, "b"))
        return ad.tsum(ad.mul(prod, prod))

    assert fd_param_check(build, store) < 1e-6


def test_clip_gradient_and_flat_regions():
    store = _store_with(x=np.array([-2.0, -0.5, 0.3, 0.9, 1.7]))

    def build():
        tape = Tape()
        return ad.tsum(ad.clip(store.leaf_on(tape, "x"), 0.0, 1.0))

    assert fd_param_check(build, store) < 1e-6
    store.zero_grads()
    loss = build()
    loss.tape.backward(loss)
    assert np.array_equal(store.grad("x"), np.array([0.0, 0.0, 1.0, 1.0, 0.0]))


def test_reduction_concat_gather_segment_gradients():
    rng = np.random.default_rng(5)
    store = _store_with(a=rng.standard_normal((6, 3)), b=rng.standard_normal((6, 2)))
    idx = np.array([0, 0, 2, 5, 3, 3, 1])
    seg = np.array([0, 1, 1, 2, 0, 3, 3])

    def build():
        tape = Tape()
        a = store.leaf_on(tape, "a")
        b = store.leaf_on(tape, "b")
        cat = ad.concat([a, b], axis=1)
        rows = ad.gather(cat, idx)
        pooled = ad.segment_sum(rows, seg, 4)
        per_row = ad.tmean(pooled, axis=1)
        return ad.tsum(ad.mul(per_row, per_row))

    assert fd_param_check(build, store) < 1e-6


def test_shift_right_and_rowdot_gradients():
    rng = np.random.default_rng(6)
    store = _store_with(v=rng.standard_normal(5), a=rng.standard_normal((4, 3)), b=rng.standard_normal((4, 3)))

    def build():
        tape = Tape()
        v = store.leaf_on(tape, "v")
        shifted = ad.shift_right(v, -1e30)
        part1 = ad.tsum(ad.mul(ad.gather(shifted, np.array([1, 2, 3, 4])), tape.constant(np.arange(1.0, 5.0))))
        d = ad.rowdot(store.leaf_on(tape, "a"), store.leaf_on(tape, "b"))
        return ad.add(part1, ad.tsum(ad.mul(d, d)))

    assert fd_param_check(build, store) < 1e-6


def test_shift_right_forward():
    tape = Tape()
    v = tape.constant(np.array([1.0, 2.0, 3.0]))
    out = ad.shift_right(v, -7.0)
    assert np.array_equal(out.data, np.array([-7.0, 1.0, 2.0]))


# --- spec'd trivial cases --------------------------------------------------


def test_mlp_zero_weights_gives_zeros():
    store = ParamStore()
    sizes = [3, 4, 2]
    for i, (fi, fo) in enumerate(zip(sizes[:-1], sizes[1:])):
        store.add(f"net.W{i}", np.zeros((fi, fo)))
        store.add(f"net.b{i}", np.zeros(fo))
    tape = Tape()
    x = tape.constant(np.random.default_rng(0).standard_normal((5, 3)))
    out = ad.mlp_forward(store, "net", x, sizes)
    assert np.array_equal(out.data, np.zeros((5, 2)))


def test_identity_affine_layer_passes_input_through():
    store = _store_with(**{"net.W0": np.eye(4), "net.b0": np.zeros(4)})
    tape = Tape()
    x = tape.constant(np.random.default_rng(1).standard_normal((6, 4)))
    out = ad.mlp_forward(store, "net", x, [4, 4])
    assert np.array_equal(out.data, x.data)


def test_random_two_layer_mlp_gradcheck():
    rng = np.random.default_rng(7)
    store = ParamStore()
    ad.init_mlp(store, "net", [8, 6, 3], rng)
    x_in = rng.standard_normal((5, 8))

    def build():
        tape = Tape()
        out = ad.mlp_forward(store, "net", tape.constant(x_in), [8, 6, 3])
        return ad.tsum(ad.mul(out, out))

    assert fd_param_check(build, store, max_per_param=30) < 1e-6


def test_mlp_shape_mismatch_raises():
    rng = np.random.default_rng(8)
    store = ParamStore()
    ad.init_mlp(store, "net", [8, 6, 3], rng)
    tape = Tape()
    with pytest.raises(ConfigError):
        ad.mlp_forward(store, "net", tape.constant(np.zeros((2, 5))), [8, 6, 3])


def test_loss_sum_of_parameter_gives_ones():
    store = _store_with(p=np.random.default_rng(9).standard_normal((3, 3)))
    tape = Tape()
    loss = ad.tsum(store.leaf_on(tape, "p"))
    tape.backward(loss)
    assert np.array_equal(store.grad("p"), np.ones((3, 3)))


def test_loss_zero_times_parameter_gives_zeros():
    store = _store_with(p=np.ones(4))
    tape = Tape()
    loss = ad.tsum(ad.mul(store.leaf_on(tape, "p"), 0.0))
    tape.backward(loss)
    assert np.array_equal(store.grad("p"), np.zeros(4))


def test_fanout_accumulates_both_paths():
    store = _store_with(p=np.array([1.5, -2.0, 0.5]))
    a = np.array([2.0, 3.0, 4.0])
    b = np.array([-1.0, 5.0, 0.5])
    tape = Tape()
    p = store.leaf_on(tape, "p")
    loss = ad.add(ad.tsum(ad.mul(p, tape.constant(a))), ad.tsum(ad.mul(p, tape.constant(b))))
    tape.backward(loss)
    assert np.allclose(store.grad("p"), a + b, rtol=0, atol=0)


def test_unreachable_parameter_keeps_zero_grad():
    store = _store_with(used=np.ones(2), unused=np.ones(2))
    tape = Tape()
    loss = ad.tsum(store.leaf_on(tape, "used"))
    tape.backward(loss)
    assert np.array_equal(store.grad("unused"), np.zeros(2))


def test_backward_rejects_non_scalar_loss():
    store = _store_with(p=np.ones(3))
    tape = Tape()
    vec = ad.mul(store.leaf_on(tape, "p"), 2.0)
    with pytest.raises(ConfigError):
        tape.backward(vec)


def test_non_finite_forward_trips_error():
    tape = Tape()
    big = tape.constant(np.array([800.0]))
    with pytest.raises(NumericalError):
        ad.exp(big)
    with pytest.raises(NumericalError):
        ad.div(tape.constant(np.ones(2)), tape.constant(np.zeros(2)))
    with pytest.raises(NumericalError):
        ad.log(tape.constant(np.array([-1.0])))
    with pytest.raises(NumericalError):
        Tensor(np.array([np.nan]), tape, needs_grad=False)


def test_forward_backward_determinism():
    rng = np.random.default_rng(10)
    store = ParamStore()
    ad.init_mlp(store, "net", [6, 5, 2], rng)
    x_in = rng.standard_normal((4, 6))

    def run():
        store.zero_grads()
        tape = Tape()
        out = ad.mlp_forward(store, "net", tape.constant(x_in), [6, 5, 2])
        loss = ad.tsum(ad.mul(out, out))
        tape.backward(loss)
        return float(loss.data), {n: store.grad(n).copy() for n in store.names()}

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    for name in g1:
        assert np.array_equal(g1[name], g2[name])


# --- ParamStore / Adam -----------------------------------------------------


def test_paramstore_duplicate_and_missing():
    store = _store_with(p=np.ones(2))
    with pytest.raises(ConfigError):
        store.add("p", np.zeros(2))
    with pytest.raises(ConfigError):
        store.value("q")


def test_paramstore_clone_is_independent():
    store = _store_with(p=np.ones(2))
    other = store.clone()
    other.value("p")[0] = 99.0
    assert store.value("p")[0] == 1.0


def test_adam_zero_grads_leaves_parameters_unchanged():
    store = _store_with(p=np.array([1.0, 2.0]))
    before = store.value("p").copy()
    adam_step(store, lr=1e-3)
    assert np.array_equal(store.value("p"), before)


def test_adam_first_step_size():
    store = _store_with(p=np.array([0.0]))
    store.grad("p")[...] = 1.0
    adam_step(store, lr=1e-3)
    # fresh moments with grad 1 give a step of lr/(1 + eps)
    assert abs(store.value("p")[0] + 1e-3) < 1e-10


def test_adam_descends_quadratic():
    store = _store_with(p=np.array([3.0, -2.0]))
    target = np.array([1.0, 1.0])

    def loss_value():
        return float(((store.value("p") - target) ** 2).sum())

    losses = [loss_value()]
    for _ in range(100):
        store.zero_grads()
        tape = Tape()
        p = store.leaf_on(tape, "p")
        diff = ad.sub(p, tape.constant(target))
        loss = ad.tsum(ad.mul(diff, diff))
        tape.backward(loss)
        adam_step(store, lr=0.05)
        losses.append(loss_value())
    assert losses[-1] < losses[0] * 0.05


def test_leaf_shares_grad_buffer_with_store():
    store = _store_with(p=np.array([2.0, 4.0]))
    tape = Tape()
    leaf = store.leaf_on(tape, "p")
    loss = ad.tsum(ad.mul(leaf, leaf))
    tape.backward(loss)
    assert leaf.grad is store.grad("p")
    assert np.allclose(store.grad("p"), 2.0 * store.value("p"), rtol=0, atol=0)
