"""Random mini-graphs and finite-difference gradient checks shared by the tensor
tests and the acceptance suite."""
import numpy as np

from dsv import tensor as T

H = 1e-5

UNARY = (
    ("exp", lambda h: T.exp(T.mul(h, 0.3))),
    ("relu", T.relu),
    ("square", lambda h: T.mul(T.pow(h, 2.0), 0.5)),
    ("softmax", lambda h: T.softmax(h, axis=-1)),
    ("abs", T.abs),
    ("ssqrt", lambda h: T.signed_sqrt(T.add(T.mul(h, h), 0.5))),
    ("clip", lambda h: T.clip(h, -5.0, 5.0)),
    ("neg", T.neg),
)

HEADS = (
    ("lse", lambda h: T.sum(T.log_sum_exp(h, axis=-1))),
    ("l2", lambda h: T.mul(T.l2_norm_sq(h), 0.1)),
    ("mean", lambda h: T.mean(T.mul(h, h))),
    ("l1", T.l1_norm),
)


def _weighted(head, seed):
    # a fixed random weighting keeps heads like l1(softmax(.)) from being constant
    def apply(h):
        w = np.random.default_rng(seed).uniform(0.5, 1.5, size=h.shape)
        return head(T.mul(h, w))
    return apply


def _pick(rng, options, k):
    return [options[i] for i in rng.integers(len(options), size=k)]


def random_graph(seed: int):
    """Return (inputs, fn, description); fn maps a list of Tensors to a scalar."""
    rng = np.random.default_rng(seed)
    kind = seed % 3
    ops = _pick(rng, UNARY, int(rng.integers(1, 4)))
    name, head = _pick(rng, HEADS, 1)[0]
    head = (name, _weighted(head, seed))
    if kind == 0:
        a, b, c = (int(v) for v in rng.integers(2, 6, size=3))
        inputs = [rng.normal(size=(a, b)), rng.normal(size=(b, c)), rng.normal(size=(a, c))]

        def fn(xs):
            h = T.add(T.matmul(xs[0], xs[1]), xs[2])
            for _, op in ops:
                h = op(h)
            return head[1](h)
    elif kind == 1:
        cin, size = int(rng.integers(1, 3)), int(rng.integers(4, 7))
        cout, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        out = int(rng.integers(2, 5))
        inputs = [rng.normal(size=(2, cin, size, size)), rng.normal(size=(cout, cin, 3, 3))]
        pool = bool(rng.integers(2))

        def fn(xs):
            h = T.conv2d(xs[0], xs[1], pad)
            for _, op in ops:
                h = op(h)
            if pool:
                h = T.maxpool2x2(h)
            h = T.bilinear_resize(h, out, out)
            return head[1](T.reshape(h, (2, -1)))
    else:
        a, b = (int(v) for v in rng.integers(2, 6, size=2))
        inputs = [rng.normal(size=(a, b)), rng.normal(size=(a, b)), rng.normal(size=(1, b))]

        def fn(xs):
            h = T.sub(T.mul(xs[0], xs[1]), T.expand(xs[2], (a, b)))
            h = T.transpose(h)
            for _, op in ops:
                h = op(h)
            return head[1](T.add(h, T.mean(h)))
    desc = f"kind={kind} ops={[n for n, _ in ops]} head={head[0]}"
    return inputs, fn, desc


def _value(fn, arrays):
    return fn([T.Tensor(a) for a in arrays]).item()


def _rel(a, b) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def first_order_error(inputs, fn) -> float:
    leaves = [T.Tensor(a, requires_grad=True) for a in inputs]
    grads = T.grad(fn(leaves), leaves)
    fds = []
    for k, a in enumerate(inputs):
        fd = np.zeros_like(a)
        for i in np.ndindex(a.shape):
            plus = [x.copy() for x in inputs]
            minus = [x.copy() for x in inputs]
            plus[k][i] += H
            minus[k][i] -= H
            fd[i] = (_value(fn, plus) - _value(fn, minus)) / (2 * H)
        fds.append(fd.ravel())
    return _rel(np.concatenate([g.data.ravel() for g in grads]), np.concatenate(fds))


def _gradients(fn, arrays):
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    return [g.data for g in T.grad(fn(leaves), leaves)]


def second_order_error(inputs, fn, seed: int = 0) -> float:
    """Hessian-vector product (grad of <grad f, v>) against differences of grad f."""
    rng = np.random.default_rng(seed)
    v = [rng.normal(size=a.shape) for a in inputs]
    leaves = [T.Tensor(a, requires_grad=True) for a in inputs]
    g = T.grad(fn(leaves), leaves, create_graph=True)
    dot = T.sum(T.concat([T.reshape(T.mul(gi, vi), (-1,)) for gi, vi in zip(g, v)]))
    hv = []
    for leaf in leaves:
        try:
            hv.append(T.grad(dot, leaf).data)
        except T.GradError:      # gradient does not depend on this leaf
            hv.append(np.zeros(leaf.shape))
    plus = _gradients(fn, [a + H * d for a, d in zip(inputs, v)])
    minus = _gradients(fn, [a - H * d for a, d in zip(inputs, v)])
    fd = [(p - m) / (2 * H) for p, m in zip(plus, minus)]
    return _rel(np.concatenate([h.ravel() for h in hv]), np.concatenate([f.ravel() for f in fd]))
