"""Shared builders for the test suites.

``op_loss_suite`` is the canonical list of autodiff op-kinds, each wrapped
in a random scalar loss suitable for finite-difference checking.  Both the
unit tests and the acceptance gate iterate this list so an op added to the
engine must be registered here to count as covered.

``check_network_gradients`` runs the same finite-difference comparison over
a network's full parameter vector (optionally a coordinate subset).
"""

import numpy as np

from physkin import tensor as T


def check_network_gradients(net, loss_builder, coords=None, step=1e-5):
    """FD check of d(loss)/d(params) for a SkinningNet-like object.

    loss_builder(net, tape, leaves) must return a scalar Tensor.  Uses the
    same magnitude-floored relative error as tensor.grad_check.
    """
    base = net.flat()

    def loss_value():
        tape = T.Tape()
        leaves = net.leaves(tape)
        out = loss_builder(net, tape, leaves)
        return tape, leaves, out

    tape, leaves, out = loss_value()
    grads = tape.backward(out)
    g_tape = net.grads_flat(tape, grads, leaves)

    if coords is None:
        coords = np.arange(base.size)
    coords = np.asarray(coords, dtype=np.intp)
    g_fd = np.empty(coords.size)
    for j, idx in enumerate(coords):
        for sgn in (+1, -1):
            vec = base.copy()
            vec[idx] += sgn * step
            net.set_flat(vec)
            _, _, o = loss_value()
            if sgn > 0:
                fp = float(o.data.reshape(()))
            else:
                fm = float(o.data.reshape(()))
        g_fd[j] = (fp - fm) / (2 * step)
    net.set_flat(base)

    g_t = g_tape[coords]
    floor = 1e-6 * max(1.0, np.abs(g_fd).max(initial=0.0))
    denom = np.maximum(np.maximum(np.abs(g_t), np.abs(g_fd)), floor)
    rel = np.abs(g_t - g_fd) / denom
    return float(rel.max(initial=0.0)), rel


def op_loss_suite():
    """Returns [(name, builder)] where builder(rng) -> (x0, f).

    f takes the leaf Tensor and returns a scalar Tensor; auxiliary inputs
    are closed-over constants so the check differentiates w.r.t. x only.
    """

    def with_const(shape, rng):
        # magnitudes bounded away from zero so every coordinate of the loss
        # keeps a finite-difference-measurable sensitivity
        mag = rng.uniform(0.5, 1.5, shape)
        sign = np.where(rng.standard_normal(shape) < 0.0, -1.0, 1.0)
        return T.constant(mag * sign)

    suite = []

    def reg(name):
        def deco(fn):
            suite.append((name, fn))
            return fn
        return deco

    @reg("add")
    def _add(rng):
        c = with_const((4, 3), rng)
        return rng.standard_normal((4, 3)), lambda x: T.sum_all(T.square(T.add(x, c)))

    @reg("sub")
    def _sub(rng):
        c = with_const((4, 3), rng)
        return rng.standard_normal((4, 3)), lambda x: T.sum_all(T.square(T.sub(x, c)))

    @reg("mul")
    def _mul(rng):
        c = with_const((5, 2), rng)
        return rng.standard_normal((5, 2)), lambda x: T.sum_all(T.mul(x, T.mul(x, c)))

    @reg("matmul")
    def _matmul(rng):
        c = with_const((3, 4), rng)
        return rng.standard_normal((5, 3)), lambda x: T.sum_all(T.square(T.matmul(x, c)))

    @reg("transpose")
    def _transpose(rng):
        c = with_const((3, 5), rng)
        return rng.standard_normal((5, 3)), lambda x: T.sum_all(T.mul(T.transpose(x), c))

    @reg("concat_last")
    def _concat(rng):
        c = with_const((4, 2), rng)
        return rng.standard_normal((4, 3)), \
            lambda x: T.sum_all(T.square(T.concat_last([x, c, x])))

    @reg("concat_rows")
    def _concat_rows(rng):
        c = with_const((2, 3), rng)
        return rng.standard_normal((4, 3)), \
            lambda x: T.sum_all(T.square(T.concat_rows([c, x])))

    @reg("sum")
    def _sum(rng):
        return rng.standard_normal((6,)), lambda x: T.sum_all(T.square(x))

    @reg("mean")
    def _mean(rng):
        return rng.standard_normal((3, 7)), lambda x: T.mean_all(T.square(x))

    @reg("square")
    def _square(rng):
        return rng.standard_normal((4, 4)), lambda x: T.sum_all(T.square(x))

    @reg("sqrt")
    def _sqrt(rng):
        # keep the argument strictly positive
        return rng.standard_normal((5,)), \
            lambda x: T.sum_all(T.sqrt(T.add(T.square(x), T.constant(np.full(5, 0.5)))))

    @reg("elu")
    def _elu(rng):
        return rng.standard_normal((8,)) * 2.0, lambda x: T.sum_all(T.square(T.elu(x)))

    @reg("softmax")
    def _softmax(rng):
        c = with_const((3, 5), rng)
        return rng.standard_normal((3, 5)), \
            lambda x: T.sum_all(T.mul(T.softmax_last(x), c))

    @reg("scale_float")
    def _scale(rng):
        return rng.standard_normal((4, 2)), lambda x: T.sum_all(T.scale(T.square(x), 0.37))

    @reg("scale_tensor")
    def _scale_t(rng):
        return rng.standard_normal((7,)), \
            lambda x: T.sum_all(T.scale(T.square(x), T.mean_all(x)))

    @reg("l2_normalize_columns")
    def _l2n(rng):
        c = with_const((6, 3), rng)
        return rng.standard_normal((6, 3)), \
            lambda x: T.sum_all(T.mul(T.l2_normalize_columns(x), c))

    @reg("batched_dot")
    def _bdot(rng):
        c = with_const((5, 3), rng)
        return rng.standard_normal((5, 3)), \
            lambda x: T.sum_all(T.square(T.batched_dot(x, c)))

    @reg("slice_rows")
    def _slice_rows(rng):
        c = with_const((2, 3), rng)
        return rng.standard_normal((5, 3)), \
            lambda x: T.sum_all(T.square(T.mul(T.slice_rows(x, 1, 3), c)))

    @reg("reshape")
    def _reshape(rng):
        c = with_const((2, 6), rng)
        return rng.standard_normal((4, 3)), \
            lambda x: T.sum_all(T.mul(T.reshape(x, (2, 6)), c))

    @reg("add_bias")
    def _add_bias(rng):
        c = with_const((4, 3), rng)
        return rng.standard_normal((3,)), \
            lambda x: T.sum_all(T.square(T.add_bias(c, x)))

    @reg("layer_norm")
    def _layer_norm(rng):
        g = with_const((6,), rng)
        b = with_const((6,), rng)
        return rng.standard_normal((4, 6)), \
            lambda x: T.sum_all(T.square(T.layer_norm(x, g, b)))

    @reg("reciprocal")
    def _recip(rng):
        return rng.standard_normal((5,)), \
            lambda x: T.sum_all(T.reciprocal(T.add(T.square(x), T.constant(np.full(5, 1.0)))))

    return suite
