"""Autodiff core: op gradients vs finite differences, Adam, checkpoints."""

import numpy as np
import pytest

from conftest import check_grad_against_fd, finite_diff_grad, max_rel_error

from slmforge import tensor as T
from slmforge.errors import CheckpointError, GraphError, NonFiniteError
from slmforge.nn import (
    Adam,
    Linear,
    Module,
    Parameter,
    TransformerLayer,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from slmforge.tensor import Tensor


def rand(rng, *shape):
    return rng.uniform(-2.0, 2.0, size=shape)


def test_square_gradient_analytic():
    x = Tensor(3.0, requires_grad=True)
    loss = x * x
    loss.backward()
    assert x.grad == pytest.approx(6.0)


def test_add_broadcast_gradient():
    rng = np.random.default_rng(0)
    err = check_grad_against_fd(T.add, [rand(rng, 3, 4), rand(rng, 4)])
    assert err < 1e-4


def test_mul_gradient():
    rng = np.random.default_rng(1)
    err = check_grad_against_fd(T.mul, [rand(rng, 3, 4), rand(rng, 3, 4)])
    assert err < 1e-4


def test_matmul_matches_triple_loop_oracle():
    rng = np.random.default_rng(2)
    a = rand(rng, 2, 3)
    b = rand(rng, 3, 2)
    got = T.matmul(Tensor(a), Tensor(b)).data
    want = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(3):
                want[i, j] += a[i, k] * b[k, j]
    assert np.max(np.abs(got - want)) < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(GraphError, match=r"\(2, 3\).*\(2, 2\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))


def test_concat_last_dim_shape():
    a = Tensor(np.zeros((5, 3)))
    b = Tensor(np.zeros((5, 4)))
    assert T.concat_last_dim([a, b]).data.shape == (5, 7)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    out = T.softmax(Tensor(rand(rng, 6, 9))).data
    assert np.max(np.abs(out.sum(axis=-1) - 1.0)) < 1e-9


def test_log_softmax_is_log_of_softmax():
    rng = np.random.default_rng(4)
    x = rand(rng, 5, 7)
    assert np.max(np.abs(T.log_softmax(Tensor(x)).data
                         - np.log(T.softmax(Tensor(x)).data))) < 1e-9


def test_layer_norm_statistics_before_affine():
    rng = np.random.default_rng(5)
    x = Tensor(rand(rng, 8, 16))
    out = T.layer_norm(x, Tensor(np.ones(16)), Tensor(np.zeros(16))).data
    assert np.max(np.abs(out.mean(axis=-1))) < 1e-9
    assert np.max(np.abs(out.var(axis=-1) - 1.0)) < 1e-6


def test_cross_entropy_uniform_logits_is_log_k():
    logits = Tensor(np.zeros((5, 4)))
    loss = T.cross_entropy(logits, np.array([0, 1, 2, 3, 0]))
    assert loss.item() == pytest.approx(np.log(4.0), abs=1e-12)


def test_cross_entropy_invariant_to_masked_targets():
    rng = np.random.default_rng(6)
    logits_data = rand(rng, 6, 5)
    mask = np.array([1, 0, 1, 0, 1, 0], dtype=np.float64)
    base_targets = np.array([1, 2, 3, 4, 0, 1])
    perturbed = base_targets.copy()
    perturbed[mask == 0] = [4, 2, 3]

    losses, grads = [], []
    for targets in (base_targets, perturbed):
        logits = Tensor(logits_data.copy(), requires_grad=True)
        loss = T.cross_entropy(logits, targets, mask)
        loss.backward()
        losses.append(loss.item())
        grads.append(logits.grad.copy())
    assert losses[0] == losses[1]
    assert np.array_equal(grads[0], grads[1])


def test_cross_entropy_all_zero_mask_is_zero_loss_no_grad():
    logits = Tensor(np.random.default_rng(7).standard_normal((4, 3)),
                    requires_grad=True)
    loss = T.cross_entropy(logits, np.array([0, 1, 2, 0]), np.zeros(4))
    assert loss.item() == 0.0
    loss.backward()
    assert logits.grad is None or not np.any(logits.grad)


def test_non_finite_forward_names_op():
    big = Tensor(np.array([1e308]), requires_grad=True)
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError, match="mul"):
        _ = big * big


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        (x * x).backward()


@pytest.mark.parametrize("op_name", [
    "add", "mul", "matmul", "transpose", "reshape", "concat_last_dim",
    "softmax", "log_softmax", "relu", "gelu", "layer_norm",
    "embedding_lookup", "conv1d", "cross_entropy",
])
def test_op_gradients_match_finite_differences(op_name):
    """Every layer op: analytic vs central differences, seeded trials."""
    trials = 10
    worst = 0.0
    for trial in range(trials):
        rng = np.random.default_rng(hash(op_name) % (2**32) + trial)
        if op_name == "add":
            worst = max(worst, check_grad_against_fd(
                T.add, [rand(rng, 3, 4), rand(rng, 3, 4)], seed=trial))
        elif op_name == "mul":
            worst = max(worst, check_grad_against_fd(
                T.mul, [rand(rng, 3, 4), rand(rng, 4)], seed=trial))
        elif op_name == "matmul":
            worst = max(worst, check_grad_against_fd(
                T.matmul, [rand(rng, 3, 4), rand(rng, 4, 2)], seed=trial))
        elif op_name == "transpose":
            worst = max(worst, check_grad_against_fd(
                lambda a: T.transpose(a, (1, 0)), [rand(rng, 3, 4)], seed=trial))
        elif op_name == "reshape":
            worst = max(worst, check_grad_against_fd(
                lambda a: T.reshape(a, (2, 6)), [rand(rng, 3, 4)], seed=trial))
        elif op_name == "concat_last_dim":
            worst = max(worst, check_grad_against_fd(
                lambda a, b: T.concat_last_dim([a, b]),
                [rand(rng, 3, 2), rand(rng, 3, 3)], seed=trial))
        elif op_name == "softmax":
            worst = max(worst, check_grad_against_fd(
                T.softmax, [rand(rng, 4, 5)], seed=trial))
        elif op_name == "log_softmax":
            worst = max(worst, check_grad_against_fd(
                T.log_softmax, [rand(rng, 4, 5)], seed=trial))
        elif op_name == "relu":
            x = rand(rng, 4, 5)
            x[np.abs(x) < 1e-3] = 0.5  # keep FD away from the kink
            worst = max(worst, check_grad_against_fd(T.relu, [x], seed=trial))
        elif op_name == "gelu":
            worst = max(worst, check_grad_against_fd(T.gelu, [rand(rng, 4, 5)],
                                                     seed=trial))
        elif op_name == "layer_norm":
            worst = max(worst, check_grad_against_fd(
                T.layer_norm,
                [rand(rng, 3, 6), rand(rng, 6), rand(rng, 6)], seed=trial))
        elif op_name == "embedding_lookup":
            ids = rng.integers(0, 5, size=7)
            worst = max(worst, check_grad_against_fd(
                lambda t: T.embedding_lookup(t, ids), [rand(rng, 5, 4)], seed=trial))
        elif op_name == "conv1d":
            worst = max(worst, check_grad_against_fd(
                lambda x, w, b: T.conv1d(x, w, b, stride=2),
                [rand(rng, 9, 3), rand(rng, 4, 3, 2), rand(rng, 4)], seed=trial))
        elif op_name == "cross_entropy":
            targets = rng.integers(0, 5, size=6)
            mask = (rng.random(6) < 0.7).astype(np.float64)
            mask[0] = 1.0
            worst = max(worst, check_grad_against_fd(
                lambda lg: T.cross_entropy(lg, targets, mask),
                [rand(rng, 6, 5)], seed=trial))
    assert worst < 1e-4, f"{op_name}: worst relative error {worst}"


def test_composite_graph_gradient_matches_fd():
    rng = np.random.default_rng(11)
    x_data = rand(rng, 4, 3)
    w_data = rand(rng, 3, 3)

    def network(x_arr):
        x = Tensor(x_arr)
        w = Tensor(w_data)
        h = T.gelu(T.matmul(x, w))
        s = T.softmax(h)
        return float(T.tsum(s * s).data)

    x = Tensor(x_data, requires_grad=True)
    w = Tensor(w_data)
    h = T.gelu(T.matmul(x, w))
    s = T.softmax(h)
    loss = T.tsum(s * s)
    loss.backward()
    numeric = finite_diff_grad(network, x_data.copy())
    assert max_rel_error(x.grad, numeric) < 1e-4


# ---------------------------------------------------------------------------
# Adam


def test_adam_first_step_closed_form():
    # first Adam step: delta = -lr * g / (|g| + eps); param 1.0, g 0.5, lr 0.1
    mod = Module()
    mod.p = Parameter(np.array([1.0]))
    mod.p.grad = np.array([0.5])
    opt = Adam(mod, lr=0.1)
    opt.step()
    expected = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8)
    assert mod.p.data[0] == pytest.approx(expected, abs=1e-12)
    assert mod.p.data[0] == pytest.approx(0.9, abs=1e-7)
    assert opt.t == 1


def test_adam_zero_grad_leaves_parameter():
    mod = Module()
    mod.p = Parameter(np.array([2.0]))
    mod.p.grad = np.array([0.0])
    opt = Adam(mod, lr=0.1)
    opt.step()
    assert mod.p.data[0] == 2.0


def test_adam_skips_frozen_and_errors_on_missing_grad():
    mod = Module()
    mod.a = Parameter(np.array([1.0]))
    mod.b = Parameter(np.array([1.0]))
    mod.b.freeze()
    opt = Adam(mod, lr=0.1)
    with pytest.raises(GraphError, match="'a'"):
        opt.step()
    mod.a.grad = np.array([1.0])
    opt.step()
    assert mod.a.data[0] != 1.0
    assert mod.b.data[0] == 1.0


def test_frozen_parameter_gets_no_grad():
    w = Parameter(np.array([[2.0]]))
    w.freeze()
    x = Tensor(np.array([[3.0]]), requires_grad=True)
    loss = T.tsum(T.matmul(x, w))
    loss.backward()
    assert w.grad is None
    assert x.grad is not None


# ---------------------------------------------------------------------------
# Checkpoints


class _Net(Module):
    def __init__(self, seed=0):
        super().__init__()
        rng = np.random.default_rng(seed)
        self.fc1 = Linear(4, 8, rng)
        self.fc2 = Linear(8, 2, rng)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = _Net(seed=3)
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path, {"kind": "test", "note": "hello"})
    fresh = _Net(seed=99)
    meta = load_checkpoint(path, fresh, strict=True)
    assert meta["note"] == "hello"
    for (_, a), (_, b) in zip(net.named_parameters(), fresh.named_parameters()):
        assert a.data.tobytes() == b.data.tobytes()


def test_checkpoint_strict_shape_mismatch_names_parameter(tmp_path):
    net = _Net()
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)

    class Other(Module):
        def __init__(self):
            super().__init__()
            rng = np.random.default_rng(0)
            self.fc1 = Linear(4, 9, rng)
            self.fc2 = Linear(9, 2, rng)

    with pytest.raises(CheckpointError, match="fc1.weight"):
        load_checkpoint(path, Other(), strict=True)


def test_checkpoint_permissive_skips_mismatches(tmp_path):
    net = _Net()
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)

    class Bigger(Module):
        def __init__(self):
            super().__init__()
            rng = np.random.default_rng(1)
            self.fc1 = Linear(4, 8, rng)
            self.extra = Linear(2, 2, rng)

    target = Bigger()
    load_checkpoint(path, target, strict=False)
    assert np.array_equal(target.fc1.weight.data, net.fc1.weight.data)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(path)


def test_load_never_restores_optimizer_state(tmp_path):
    net = _Net(seed=5)
    opt = Adam(net, lr=1e-3)
    for p in net.parameters():
        p.grad = np.ones_like(p.data)
    opt.step()
    path = tmp_path / "net.ckpt"
    save_checkpoint(net, path)

    fresh = _Net(seed=6)
    load_checkpoint(path, fresh, strict=True)
    fresh_opt = Adam(fresh, lr=1e-3)
    assert fresh_opt.t == 0
    assert fresh_opt._m == {} and fresh_opt._v == {}


def test_seeded_init_reproducible_training_trajectory():
    def run():
        net = _Net(seed=42)
        opt = Adam(net, lr=1e-2)
        rng = np.random.default_rng(7)
        xs = rng.standard_normal((6, 4))
        losses = []
        for _ in range(5):
            out = net.fc2(T.relu(net.fc1(Tensor(xs))))
            loss = T.tmean(out * out)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        return losses

    assert run() == run()


def test_transformer_layer_gradients_flow():
    rng = np.random.default_rng(13)
    layer = TransformerLayer(8, 2, 2, causal=True, rng=rng)
    x = Tensor(rng.standard_normal((5, 8)), requires_grad=True)
    loss = T.tsum(layer(x))
    loss.backward()
    assert x.grad is not None and np.all(np.isfinite(x.grad))
    for _, p in layer.named_parameters():
        assert p.grad is not None
