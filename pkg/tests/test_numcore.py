import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ehrframe.numcore import (
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    backward,
    dropout,
    layer_norm,
    load_arrays,
    matmul,
    ops,
    save_arrays,
    softmax,
    stream,
)

from helpers import fd_grad64


def _grad(fn, *inputs):
    leaves = [Tensor(x, requires_grad=True) for x in inputs]
    with Tape() as tape:
        out = fn(*leaves)
        tape.backward(out, leaves)
    return out, [leaf.grad for leaf in leaves]


# -- matmul -----------------------------------------------------------------

def test_matmul_identity():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(matmul(np.eye(2), a).data, a)


def test_matmul_hand_product():
    assert matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_grad_matches_finite_differences(rng):
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    _, (ga, gb) = _grad(lambda x, y: matmul(x, y).sum(), a, b)
    ref_a = fd_grad64(lambda x: (x @ b).sum(), a, h=1e-3)
    ref_b = fd_grad64(lambda y: (a @ y).sum(), b, h=1e-3)
    np.testing.assert_allclose(ga, ref_a, rtol=1e-3)
    np.testing.assert_allclose(gb, ref_b, rtol=1e-3)


# -- softmax ------------------------------------------------------------------

def test_softmax_symmetric():
    np.testing.assert_array_equal(softmax([0.0, 0.0]).data, [0.5, 0.5])


def test_softmax_large_inputs_do_not_overflow():
    out = softmax([1000.0, 1000.0]).data
    assert np.isfinite(out).all()
    np.testing.assert_array_equal(out, [0.5, 0.5])


def test_softmax_closed_form():
    np.testing.assert_allclose(softmax([0.0, math.log(3.0)]).data, [0.25, 0.75], rtol=1e-6)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 7)),
              elements=st.floats(-80, 80, width=32)), st.sampled_from([0, 1, -1]))
def test_softmax_sums_to_one(x, axis):
    out = softmax(x, axis=axis).data
    assert ((out >= 0) & (out <= 1)).all()
    np.testing.assert_allclose(out.sum(axis=axis), 1.0, atol=1e-5)


# -- layer norm ----------------------------------------------------------------

def test_layer_norm_constant_row_is_bias():
    out = layer_norm(np.full((1, 4), 7.0), np.ones(4), np.zeros(4)).data
    np.testing.assert_array_equal(out, np.zeros((1, 4)))


def test_layer_norm_two_values():
    out = layer_norm([[1.0, 3.0]], np.ones(2), np.zeros(2)).data
    np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-4)   # eps = 1e-5 in the denominator


def test_layer_norm_grad_matches_finite_differences(rng):
    x, gain, bias = rng.normal(size=(3, 5)), rng.normal(size=5), rng.normal(size=5)
    w = rng.normal(size=(3, 5))

    def ref(xx, gg, bb):
        mu = xx.mean(-1, keepdims=True)
        var = ((xx - mu) ** 2).mean(-1, keepdims=True)
        return (((xx - mu) / np.sqrt(var + 1e-5) * gg + bb) * w).sum()

    _, grads = _grad(lambda a, g, b: (layer_norm(a, g, b) * w).sum(), x, gain, bias)
    refs = [fd_grad64(lambda v: ref(v, gain, bias), x), fd_grad64(lambda v: ref(x, v, bias), gain),
            fd_grad64(lambda v: ref(x, gain, v), bias)]
    for got, want in zip(grads, refs):
        np.testing.assert_allclose(got, want, rtol=1e-3, atol=1e-6)


# -- dropout -------------------------------------------------------------------

def test_dropout_rate_zero_is_identity(rng):
    x = rng.normal(size=(4, 4))
    np.testing.assert_array_equal(dropout(x, 0.0, True, rng).data, x.astype(np.float32))


def test_dropout_inference_is_identity(rng):
    x = rng.normal(size=(4, 4))
    np.testing.assert_array_equal(dropout(x, 0.9, False, None).data, x.astype(np.float32))


def test_dropout_survivor_fraction_and_scale():
    out = dropout(np.ones(100_000), 0.5, True, stream(0, "dropout")).data
    survivors = out != 0
    assert abs(survivors.mean() - 0.5) <= 0.01
    np.testing.assert_array_equal(out[survivors], 2.0)


def test_dropout_rate_one_rejected(rng):
    with pytest.raises(ValueError):
        dropout(np.ones(3), 1.0, True, rng)


# -- backward ------------------------------------------------------------------

def test_backward_sum_gives_ones(rng):
    x = rng.normal(size=(3, 2))
    _, (g,) = _grad(lambda t: t.sum(), x)
    np.testing.assert_array_equal(g, np.ones((3, 2)))


def test_backward_sum_of_squares(rng):
    x = rng.normal(size=5).astype(np.float32)
    _, (g,) = _grad(lambda t: (t * t).sum(), x)
    np.testing.assert_allclose(g, 2 * x, rtol=1e-6)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = x * 2.0
        with pytest.raises(ValueError):
            backward(y, tape, [x])


def test_unreached_leaf_gets_zero_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    unused = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        tape.backward((x * 3.0).sum(), [x, unused])
    np.testing.assert_array_equal(unused.grad, np.zeros((2, 2)))


def test_gradients_accumulate_over_reuse():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    with Tape() as tape:
        tape.backward((x * x + x).sum(), [x])
    np.testing.assert_allclose(x.grad, [3.0, 5.0])


def test_tape_clear_releases_records():
    x = Tensor(np.ones(3), requires_grad=True)
    with Tape() as tape:
        y = ops.exp(x)
        loss = y.sum()
    assert len(tape) == 2
    tape.clear()
    assert len(tape) == 0
    assert y._parents == () and loss._backward is None


def test_no_recording_without_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = x * 2.0
    assert not y.requires_grad


def test_forward_and_backward_are_deterministic(rng):
    a, b = rng.normal(size=(6, 5)), rng.normal(size=(5, 4))

    def run():
        return _grad(lambda x, y: (ops.gelu(matmul(x, y)) * softmax(matmul(x, y))).sum(), a, b)

    (o1, g1), (o2, g2) = run(), run()
    assert o1.data.tobytes() == o2.data.tobytes()
    assert all(x.tobytes() == y.tobytes() for x, y in zip(g1, g2))


def test_log_of_zero_raises():
    with pytest.raises(NumericError):
        ops.log(np.zeros(2))


# -- every op against a float64 reference -----------------------------------------

def _away_from_zero(x, margin=0.05):
    return np.where(np.abs(x) < margin, np.sign(x) * margin + (x == 0) * margin, x)


def _gelu_ref(x):
    return 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))


def _softmax_ref(x, axis):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


_IDX = np.array([2, 0, 2, 1])

# name -> (engine op, float64 reference, input generator)
OP_CASES = {
    "add": (lambda a, b: a + b, lambda a, b: a + b, lambda r: (r.normal(size=(3, 4)), r.normal(size=(4,)))),
    "sub": (lambda a, b: a - b, lambda a, b: a - b, lambda r: (r.normal(size=(3, 1)), r.normal(size=(3, 4)))),
    "mul": (lambda a, b: a * b, lambda a, b: a * b, lambda r: (r.normal(size=(2, 3)), r.normal(size=(2, 3)))),
    "div": (lambda a, b: a / b, lambda a, b: a / b,
            lambda r: (r.normal(size=(2, 3)), r.uniform(0.5, 2.0, size=(2, 3)))),
    "matmul_batched": (ops.matmul, lambda a, b: a @ b, lambda r: (r.normal(size=(2, 3, 4)), r.normal(size=(4, 2)))),
    "relu": (ops.relu, lambda x: np.maximum(x, 0), lambda r: (_away_from_zero(r.normal(size=(4, 3))),)),
    "gelu": (ops.gelu, _gelu_ref, lambda r: (r.normal(size=(4, 3)) * 2,)),
    "sigmoid": (ops.sigmoid, lambda x: 1 / (1 + np.exp(-x)), lambda r: (r.normal(size=(5,)) * 3,)),
    "softplus": (ops.softplus, lambda x: np.log1p(np.exp(x)), lambda r: (r.normal(size=(5,)) * 3,)),
    "exp": (ops.exp, np.exp, lambda r: (r.normal(size=(2, 3)),)),
    "log": (ops.log, np.log, lambda r: (r.uniform(0.3, 3.0, size=(2, 3)),)),
    "gate_log": (ops.gate_log, np.log, lambda r: (r.uniform(0.3, 3.0, size=(2, 3)),)),
    "clip": (lambda x: ops.clip(x, -0.5, 0.5), lambda x: np.clip(x, -0.5, 0.5),
             lambda r: (np.where(np.abs(np.abs(v := r.normal(size=(6,))) - 0.5) < 0.05, v * 1.3, v),)),
    "square": (ops.square, np.square, lambda r: (r.normal(size=(3, 3)),)),
    "power": (lambda x: ops.power(x, 2.5), lambda x: x ** 2.5, lambda r: (r.uniform(0.5, 2.0, size=(4,)),)),
    "sum_axis": (lambda x: ops.sum(x, axis=1, keepdims=True), lambda x: x.sum(axis=1, keepdims=True),
                 lambda r: (r.normal(size=(3, 4)),)),
    "mean_axis": (lambda x: ops.mean(x, axis=0), lambda x: x.mean(axis=0), lambda r: (r.normal(size=(3, 4)),)),
    "reshape": (lambda x: x.reshape(4, 3), lambda x: x.reshape(4, 3), lambda r: (r.normal(size=(2, 6)),)),
    "transpose": (lambda x: x.transpose(2, 0, 1), lambda x: x.transpose(2, 0, 1),
                  lambda r: (r.normal(size=(2, 3, 4)),)),
    "slice": (lambda x: x[1:, ::2], lambda x: x[1:, ::2], lambda r: (r.normal(size=(3, 5)),)),
    "fancy_index": (lambda x: x[_IDX], lambda x: x[_IDX], lambda r: (r.normal(size=(3, 2)),)),
    "concat": (lambda a, b: ops.concat([a, b], axis=1), lambda a, b: np.concatenate([a, b], axis=1),
               lambda r: (r.normal(size=(2, 3)), r.normal(size=(2, 2)))),
    "broadcast_to": (lambda x: ops.broadcast_to(x, (3, 4)), lambda x: np.broadcast_to(x, (3, 4)),
                     lambda r: (r.normal(size=(1, 4)),)),
    "embedding": (lambda t: ops.embedding(t, _IDX), lambda t: t[_IDX], lambda r: (r.normal(size=(3, 4)),)),
    "scatter_rows": (lambda x: ops.scatter_rows(x, np.array([3, 0]), 5),
                     lambda x: _scatter_ref(x), lambda r: (r.normal(size=(2, 3)),)),
    "softmax_last": (ops.softmax, lambda x: _softmax_ref(x, -1), lambda r: (r.normal(size=(3, 4)) * 2,)),
    "softmax_axis0": (lambda x: ops.softmax(x, axis=0), lambda x: _softmax_ref(x, 0),
                      lambda r: (r.normal(size=(3, 4)) * 2,)),
    "layer_norm": (lambda x, g, b: ops.layer_norm(x, g, b),
                   lambda x, g, b: (x - x.mean(-1, keepdims=True))
                   / np.sqrt(x.var(-1, keepdims=True) + 1e-5) * g + b,
                   lambda r: (r.normal(size=(2, 5)), r.normal(size=5), r.normal(size=5))),
    "linear": (ops.linear, lambda x, w, b: x @ w + b,
               lambda r: (r.normal(size=(3, 4)), r.normal(size=(4, 2)), r.normal(size=2))),
    "bce_with_logits": (lambda z: ops.bce_with_logits(z, _TARGETS),
                        lambda z: np.log1p(np.exp(z)) - z * _TARGETS, lambda r: (r.normal(size=(4,)) * 3,)),
}
_TARGETS = np.array([1.0, 0.0, 1.0, 0.0])


def _scatter_ref(x):
    out = np.zeros((5, 3))
    out[[3, 0]] = x
    return out


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_op_gradients_match_reference(name):
    """Tape gradients vs float64 central differences, 20 seeds, rel. tol 1e-2."""
    op, ref, make = OP_CASES[name]
    for seed in range(20):
        r = np.random.default_rng(seed)
        inputs = [np.asarray(x, dtype=np.float32) for x in make(r)]
        weights = r.normal(size=ref(*[x.astype(np.float64) for x in inputs]).shape)
        out, grads = _grad(lambda *ts: (op(*ts) * weights).sum(), *inputs)
        np.testing.assert_allclose(out.data, (ref(*[x.astype(np.float64) for x in inputs]) * weights).sum(),
                                   rtol=1e-4, atol=1e-5)
        for j, got in enumerate(grads):
            def scalar(v, j=j):
                args = [x.astype(np.float64) for x in inputs]
                args[j] = v
                return (ref(*args) * weights).sum()
            want = fd_grad64(scalar, inputs[j])
            np.testing.assert_allclose(got, want, rtol=1e-2, atol=1e-5, err_msg=f"{name} seed {seed} input {j}")


# -- checkpoints ----------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(tmp_path, rng):
    arrays = {"b.weight": rng.normal(size=(3, 4)).astype(np.float32),
              "a.bias": rng.normal(size=4).astype(np.float32),
              "scalar": np.array(np.float32(1.5))}
    save_arrays(tmp_path / "ckpt", arrays, {"note": "x"})
    loaded, meta = load_arrays(tmp_path / "ckpt.json")
    assert meta == {"note": "x"}
    assert list(loaded) == list(arrays)
    for name in arrays:
        assert loaded[name].tobytes() == arrays[name].tobytes()


def test_checkpoint_layout_is_manifest_plus_little_endian_blob(tmp_path):
    arrays = {"first": np.arange(3, dtype=np.float32), "second": np.full((2, 2), -2.0, dtype=np.float32)}
    save_arrays(tmp_path / "c", arrays)
    manifest = json.loads((tmp_path / "c.json").read_text())
    assert manifest["params"]["first"] == {"shape": [3], "offset": 0}
    assert manifest["params"]["second"] == {"shape": [2, 2], "offset": 12}
    blob = (tmp_path / "c.bin").read_bytes()
    assert blob == np.concatenate([arrays["first"], arrays["second"].ravel()]).astype("<f4").tobytes()


def test_truncated_blob_rejected(tmp_path):
    save_arrays(tmp_path / "c", {"w": np.ones(4, dtype=np.float32)})
    (tmp_path / "c.bin").write_bytes(b"\x00" * 8)
    with pytest.raises(ValueError):
        load_arrays(tmp_path / "c")


# -- random streams -------------------------------------------------------------

def test_streams_are_reproducible_and_distinct():
    a = stream(3, "fisher", 1).random(5)
    assert np.array_equal(a, stream(3, "fisher", 1).random(5))
    assert not np.array_equal(a, stream(3, "fisher", 2).random(5))
    assert not np.array_equal(a, stream(4, "fisher", 1).random(5))
