"""Central finite-difference gradient checks shared by unit and acceptance tests."""
import numpy as np

from oovtrack import autodiff as ad
from oovtrack.model import ModelConfig, PoseEstimator, loss
from oovtrack.train import init_params

H = 1e-6


def away_from_zero(rng, shape, gap=0.05):
    x = rng.standard_normal(shape)
    return np.sign(x) * (gap + np.abs(x))


def distinct_pairs(rng, shape):
    """(B, L, C) values whose adjacent pairs along axis 1 differ clearly."""
    x = rng.standard_normal(shape)
    x[:, 1::2, :] = x[:, 0::2, :] + np.where(rng.random(x[:, 1::2, :].shape) < 0.5, -1.0, 1.0) * (
        0.1 + rng.random(x[:, 1::2, :].shape))
    return x


# name -> builder(rng) -> (fn(*tensors) -> Tensor, [input arrays])
OPS = {
    "add": lambda r: (lambda a, b: a + b, [r.standard_normal((3, 4)), r.standard_normal(4)]),
    "sub": lambda r: (lambda a, b: a - b, [r.standard_normal((2, 3, 4)), r.standard_normal((3, 1))]),
    "mul": lambda r: (lambda a, b: a * b, [r.standard_normal((3, 4)), r.standard_normal((1, 4))]),
    "div": lambda r: (lambda a, b: a / b, [r.standard_normal((3, 4)), away_from_zero(r, (3, 4), 0.5)]),
    "neg": lambda r: (lambda a: -a, [r.standard_normal((5,))]),
    "relu": lambda r: (ad.relu, [away_from_zero(r, (4, 5))]),
    "tanh": lambda r: (ad.tanh, [r.standard_normal((4, 5))]),
    "gelu": lambda r: (ad.gelu, [r.standard_normal((4, 5))]),
    "abs": lambda r: (ad.abs_, [away_from_zero(r, (4, 5))]),
    "sum": lambda r: (lambda a: ad.sum_(a, axis=1), [r.standard_normal((3, 4, 2))]),
    "sum_keepdims": lambda r: (lambda a: ad.sum_(a, axis=(0, 2), keepdims=True), [r.standard_normal((3, 4, 2))]),
    "mean": lambda r: (lambda a: ad.mean(a, axis=-1), [r.standard_normal((3, 4))]),
    "reshape": lambda r: (lambda a: a.reshape(4, 6), [r.standard_normal((2, 3, 4))]),
    "transpose": lambda r: (lambda a: a.transpose(2, 0, 1), [r.standard_normal((2, 3, 4))]),
    "slice": lambda r: (lambda a: a[:, 1:3], [r.standard_normal((3, 4))]),
    "gather": lambda r: (lambda a: a[[0, 2, 2]], [r.standard_normal((3, 4))]),
    "concat": lambda r: (lambda a, b: ad.concat([a, b], axis=1), [r.standard_normal((2, 3)), r.standard_normal((2, 2))]),
    "matmul": lambda r: (lambda a, b: a @ b, [r.standard_normal((3, 4)), r.standard_normal((4, 2))]),
    "matmul_batched": lambda r: (lambda a, b: a @ b, [r.standard_normal((2, 3, 4)), r.standard_normal((2, 4, 5))]),
    "matmul_shared": lambda r: (lambda a, b: a @ b, [r.standard_normal((2, 3, 4)), r.standard_normal((4, 5))]),
    "softmax": lambda r: (lambda a: ad.softmax(a, axis=-1), [r.standard_normal((3, 5))]),
    "layer_norm": lambda r: (ad.layer_norm, [r.standard_normal((3, 6))]),
    "embedding": lambda r: (lambda t: ad.embedding_lookup(t, [1, 3, 1, 0]), [r.standard_normal((5, 3))]),
    "conv1d": lambda r: (ad.conv1d, [r.standard_normal((2, 7, 3)), r.standard_normal((3, 3, 4)), r.standard_normal(4)]),
    "maxpool1d": lambda r: (ad.maxpool1d, [distinct_pairs(r, (2, 6, 3))]),
}


def rel_error(a, n):
    a, n = np.ravel(a), np.ravel(n)
    denom = max(np.linalg.norm(a), np.linalg.norm(n), 1e-12)
    return float(np.linalg.norm(a - n) / denom)


def check_op(name, seed):
    """Largest relative error over the op's inputs for a random output projection."""
    rng = np.random.default_rng(seed)
    fn, arrays = OPS[name](rng)
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    proj = rng.standard_normal(fn(*[ad.Tensor(a) for a in arrays]).shape)

    def f(*vals):
        return float(np.sum(fn(*[ad.Tensor(v) for v in vals]).data * proj))

    ad.backward(ad.sum_(fn(*tensors) * proj))
    worst = 0.0
    for i, t in enumerate(tensors):
        num = np.zeros_like(arrays[i])
        for idx in np.ndindex(arrays[i].shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i][idx] += H
            minus[i][idx] -= H
            num[idx] = (f(*plus) - f(*minus)) / (2 * H)
        worst = max(worst, rel_error(t.grad, num))
    return worst


TINY = ModelConfig(embed_dim=16, heads=2, ff_dim=32, encoder_layers=1, rnn_layers=1, rnn_hidden=8,
                   conv_channels=(4, 8, 8), head_hidden=(8,))


def check_model(seed, coords=12, directions=3, length=40):
    """Relative error of the full model + loss gradient on random coordinates and directions."""
    rng = np.random.default_rng(seed)
    model = PoseEstimator(TINY)
    init_params(model, seed)
    # zero biases put ReLU inputs exactly on the kink wherever a window is all
    # zeros, so evaluate at a generic point instead
    for p in model.params.values():
        if p.ndim == 1:
            p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    x = rng.standard_normal((2, length, 21))
    s = rng.standard_normal((2, 5, 18))
    steps = length // 8
    tp, tr = rng.standard_normal((2, steps, 3)), rng.standard_normal((2, steps, 6))
    names = list(model.params)

    def value():
        pos, rot = model.forward(x, s)
        return float(loss(pos, rot, tp, tr).data)

    model.zero_grad()
    pos, rot = model.forward(x, s)
    ad.backward(loss(pos, rot, tp, tr))
    grads = {k: model.params[k].grad.copy() for k in names}

    analytic, numeric = [], []
    for _ in range(coords):
        k = names[rng.integers(len(names))]
        p = model.params[k].data
        idx = tuple(rng.integers(n) for n in p.shape)
        old = p[idx]
        p[idx] = old + H
        up = value()
        p[idx] = old - H
        down = value()
        p[idx] = old
        analytic.append(grads[k][idx])
        numeric.append((up - down) / (2 * H))
    worst = rel_error(analytic, numeric)

    for _ in range(directions):
        d = {k: rng.standard_normal(model.params[k].shape) for k in names}
        for k in names:
            model.params[k].data += H * d[k]
        up = value()
        for k in names:
            model.params[k].data -= 2 * H * d[k]
        down = value()
        for k in names:
            model.params[k].data += H * d[k]
        exact = sum(float(np.sum(grads[k] * d[k])) for k in names)
        worst = max(worst, rel_error([exact], [(up - down) / (2 * H)]))
    return worst
