"""Shared test oracles: central finite differences and the gradient case list."""

import numpy as np

import spanseq.autodiff as ad


def numeric_grad(f, tensors, eps=1e-5):
    """Central-difference gradient of scalar f() wrt each tensor, in place."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.ravel()
        gf = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = f()
            flat[i] = orig - eps
            f_minus = f()
            flat[i] = orig
            gf[i] = (f_plus - f_minus) / (2.0 * eps)
        grads.append(g)
    return grads


def rel_err(a, b):
    na = np.linalg.norm(np.ravel(a))
    nb = np.linalg.norm(np.ravel(b))
    return np.linalg.norm(np.ravel(a) - np.ravel(b)) / max(na, nb, 1e-12)


def check_gradients(build, params, eps=1e-5):
    """Compare backward() against finite differences; returns max relative error.

    build() must re-run the full forward pass from the current parameter
    values and return a scalar Tensor.
    """
    for p in params:
        p.grad = None
    with ad.ComputationTape():
        loss = build()
    ad.backward(loss)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]

    def f():
        return float(build().data)

    numeric = numeric_grad(f, params, eps=eps)
    return max(rel_err(a, n) for a, n in zip(analytic, numeric))


def _p(rng, *shape):
    return ad.tensor(rng.standard_normal(shape), requires_grad=True)


def _case_add_broadcast(rng):
    a, b = _p(rng, 3, 4), _p(rng, 4)
    return lambda: ad.sum_(ad.mul(ad.add(a, b), ad.add(a, b))), [a, b]


def _case_sub(rng):
    a, b = _p(rng, 2, 5), _p(rng, 2, 5)
    return lambda: ad.sum_(ad.mul(ad.sub(a, b), ad.sub(a, b))), [a, b]


def _case_mul_broadcast(rng):
    a, b = _p(rng, 2, 3, 4), _p(rng, 3, 4)
    return lambda: ad.sum_(ad.mul(a, b)), [a, b]


def _case_div(rng):
    a, b = _p(rng, 3, 3), ad.tensor(rng.random((3, 3)) + 1.5, requires_grad=True)
    return lambda: ad.sum_(ad.div(a, b)), [a, b]


def _case_neg(rng):
    a = _p(rng, 4)
    return lambda: ad.sum_(ad.mul(ad.neg(a), a)), [a]


def _case_matmul_2d(rng):
    a, b = _p(rng, 2, 3), _p(rng, 3, 4)
    return lambda: ad.sum_(ad.matmul(a, b)), [a, b]


def _case_matmul_batched(rng):
    a, b = _p(rng, 2, 3, 4), _p(rng, 2, 4, 5)
    return lambda: ad.sum_(ad.mul(ad.matmul(a, b), ad.matmul(a, b))), [a, b]


def _case_matmul_broadcast_rhs(rng):
    a, b = _p(rng, 2, 3, 4), _p(rng, 4, 5)
    return lambda: ad.sum_(ad.matmul(a, b)), [a, b]


def _case_dot(rng):
    a, b = _p(rng, 6), _p(rng, 6)
    return lambda: ad.dot(a, b), [a, b]


def _case_concat(rng):
    a, b = _p(rng, 2, 3), _p(rng, 2, 2)
    return lambda: ad.sum_(ad.mul(ad.concat([a, b], axis=1), ad.concat([a, b], axis=1))), [a, b]


def _case_slice(rng):
    a = _p(rng, 4, 5)
    return lambda: ad.sum_(ad.mul(ad.slice_(a, (slice(1, 3), slice(None))), 2.0)), [a]


def _case_index_select_repeats(rng):
    a = _p(rng, 5, 3)
    idx = np.array([0, 2, 2, 4, 0])
    return lambda: ad.sum_(ad.mul(ad.index_select(a, idx, axis=0), ad.index_select(a, idx, axis=0))), [a]


def _case_embedding_repeats(rng):
    t = _p(rng, 7, 4)
    ids = np.array([[1, 3, 3], [0, 6, 1]])
    return lambda: ad.sum_(ad.mul(ad.embedding(t, ids), ad.embedding(t, ids))), [t]


def _case_reshape_transpose(rng):
    a = _p(rng, 2, 3, 4)
    return lambda: ad.sum_(ad.mul(ad.transpose(ad.reshape(a, (6, 4)), (1, 0)), 3.0)), [a]


def _case_pad_axis(rng):
    a = _p(rng, 2, 3, 2)
    return lambda: ad.sum_(ad.mul(ad.pad_axis(a, 1, 2, 1), ad.pad_axis(a, 1, 2, 1))), [a]


def _case_unfold(rng):
    a = _p(rng, 2, 6, 3)
    return lambda: ad.sum_(ad.mul(ad.unfold(a, 3, axis=1), ad.unfold(a, 3, axis=1))), [a]


def _case_sum_mean(rng):
    a = _p(rng, 3, 4)

    def build():
        total = ad.sum_(ad.mul(a, a))
        per_axis = ad.sum_(ad.mean(a, axis=0))
        kept = ad.sum_(ad.sum_(ad.mul(a, 2.0), axis=1, keepdims=True))
        return ad.add(total, ad.add(per_axis, kept))

    return build, [a]


def _case_amax(rng):
    a = _p(rng, 3, 5, 2)
    return lambda: ad.sum_(ad.mul(ad.amax(a, axis=1), ad.amax(a, axis=1))), [a]


def _case_relu(rng):
    a = ad.tensor(rng.standard_normal((4, 4)) + 0.3, requires_grad=True)
    return lambda: ad.sum_(ad.relu(a)), [a]


def _case_gelu(rng):
    a = _p(rng, 3, 4)
    return lambda: ad.sum_(ad.gelu(a)), [a]


def _case_tanh_sigmoid_softplus(rng):
    a = _p(rng, 5)
    return lambda: ad.sum_(ad.add(ad.tanh(a), ad.add(ad.sigmoid(a), ad.softplus(a)))), [a]


def _case_exp_log(rng):
    a = ad.tensor(rng.random(6) + 0.5, requires_grad=True)
    return lambda: ad.sum_(ad.log(ad.exp(a))), [a]


def _case_softmax(rng):
    a = _p(rng, 3, 5)
    w = _p(rng, 3, 5)
    return lambda: ad.sum_(ad.mul(ad.softmax(a, axis=-1), w)), [a, w]


def _case_log_softmax(rng):
    a = _p(rng, 4, 6)
    w = _p(rng, 4, 6)
    return lambda: ad.sum_(ad.mul(ad.log_softmax(a, axis=-1), w)), [a, w]


def _case_layer_norm(rng):
    a = _p(rng, 3, 8)
    gain = ad.tensor(rng.random(8) + 0.5, requires_grad=True)
    bias = _p(rng, 8)
    return lambda: ad.sum_(ad.mul(ad.layer_norm(a, gain, bias), ad.layer_norm(a, gain, bias))), [a, gain, bias]


def _case_dropout_fixed_mask(rng):
    a = _p(rng, 4, 4)

    def build():
        return ad.sum_(ad.dropout(a, 0.5, np.random.default_rng(17), train=True))

    return build, [a]


def _case_mlp_chain(rng):
    x = _p(rng, 3, 5)
    w1, b1 = _p(rng, 5, 4), _p(rng, 4)
    w2, b2 = _p(rng, 4, 2), _p(rng, 2)

    def build():
        h = ad.gelu(ad.add(ad.matmul(x, w1), b1))
        o = ad.add(ad.matmul(h, w2), b2)
        return ad.neg(ad.sum_(ad.mul(ad.log_softmax(o, axis=-1), np.array([[1.0, 0], [0, 1], [1, 0]]))))

    return build, [x, w1, b1, w2, b2]


PRIMITIVE_CASES = [
    ("add_broadcast", _case_add_broadcast),
    ("sub", _case_sub),
    ("mul_broadcast", _case_mul_broadcast),
    ("div", _case_div),
    ("neg", _case_neg),
    ("matmul_2d", _case_matmul_2d),
    ("matmul_batched", _case_matmul_batched),
    ("matmul_broadcast_rhs", _case_matmul_broadcast_rhs),
    ("dot", _case_dot),
    ("concat", _case_concat),
    ("slice", _case_slice),
    ("index_select_repeats", _case_index_select_repeats),
    ("embedding_repeats", _case_embedding_repeats),
    ("reshape_transpose", _case_reshape_transpose),
    ("pad_axis", _case_pad_axis),
    ("unfold", _case_unfold),
    ("sum_mean", _case_sum_mean),
    ("amax", _case_amax),
    ("relu", _case_relu),
    ("gelu", _case_gelu),
    ("tanh_sigmoid_softplus", _case_tanh_sigmoid_softplus),
    ("exp_log", _case_exp_log),
    ("softmax", _case_softmax),
    ("log_softmax", _case_log_softmax),
    ("layer_norm", _case_layer_norm),
    ("dropout_fixed_mask", _case_dropout_fixed_mask),
    ("mlp_chain", _case_mlp_chain),
]


def run_primitive_gradient_suite(seed=1234):
    """Gradient-check every primitive case; returns [(name, max_rel_err)]."""
    results = []
    for name, make in PRIMITIVE_CASES:
        build, params = make(np.random.default_rng(seed))
        results.append((name, check_gradients(build, params)))
    return results
