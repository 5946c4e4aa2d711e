"""Central finite-difference checks for tape gradients (double precision)."""
from __future__ import annotations

import numpy as np

from hifinet import tensor as T
from hifinet.tensor import GradTape, Tensor, mul, sum_all

EPS = 1e-4
TOL = 1e-4
FLOOR = 1e-7


def project(out: Tensor, seed: int = 99) -> Tensor:
    """Reduce ``out`` to a scalar with fixed random weights so every output element matters."""
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return sum_all(mul(out, Tensor(w)))


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), FLOOR)


def check_gradients(fn, arrays, n_coords: int | None = 12, seed: int = 0, eps: float = EPS):
    """Compare tape gradients of ``fn(*tensors)`` with central differences.

    Every input gets ``n_coords`` randomly chosen coordinates checked (all of
    them when ``n_coords`` is None or the input is small), plus one
    directional derivative along a random direction over all inputs.
    Returns the worst relative error seen.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with GradTape() as tape:
        loss = fn(*tensors)
    grads = tape.gradient(loss, tensors)

    def value(vals):
        return fn(*[Tensor(v) for v in vals]).item()

    rng = np.random.default_rng(seed)
    worst = 0.0
    for i, a in enumerate(arrays):
        flat = a.reshape(-1)
        if n_coords is None or flat.size <= n_coords:
            coords = range(flat.size)
        else:
            coords = rng.choice(flat.size, size=n_coords, replace=False)
        for j in coords:
            plus = [x.copy() for x in arrays]
            minus = [x.copy() for x in arrays]
            plus[i].reshape(-1)[j] += eps
            minus[i].reshape(-1)[j] -= eps
            numeric = (value(plus) - value(minus)) / (2 * eps)
            worst = max(worst, rel_error(grads[i].reshape(-1)[j], numeric))

    direction = [rng.standard_normal(a.shape) for a in arrays]
    norm = np.sqrt(sum(float((d * d).sum()) for d in direction))
    direction = [d / norm for d in direction]
    analytic = sum(float((g * d).sum()) for g, d in zip(grads, direction))
    numeric = (value([a + eps * d for a, d in zip(arrays, direction)])
               - value([a - eps * d for a, d in zip(arrays, direction)])) / (2 * eps)
    return max(worst, rel_error(analytic, numeric))


def distinct_values(shape, rng, spacing: float = 0.01) -> np.ndarray:
    """Values with pairwise gaps >= ``spacing`` so max/ReLU kinks stay out of FD reach."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2) * spacing + spacing / 2
    return vals.reshape(shape)


class KinkProbe:
    """Records the piecewise pattern (ReLU and |x| signs, max-pool winners) of a forward pass.

    Central differences are only a valid oracle when ``x - eps`` and
    ``x + eps`` fall on the same linear piece.  Comparing the two patterns
    tells whether a coordinate's finite-difference interval straddles a kink.
    """

    def __init__(self):
        self.parts: list[np.ndarray] = []

    def __enter__(self):
        self._orig = (T.conv2d, T.relu, T.maxpool2d, T.absolute)
        conv, relu, maxpool, absolute = self._orig

        def conv2d(x, params, activation="none"):
            out = conv(x, params, activation)
            if activation == "relu":
                self.parts.append(out.data > 0)
            return out

        def relu_(x):
            self.parts.append(x.data > 0)
            return relu(x)

        def maxpool2d(x):
            n, c, h, w = x.shape
            xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
            stack = np.stack([xp[:, :, dy:dy + h, dx:dx + w] for dy in range(3) for dx in range(3)])
            self.parts.append(np.argmax(stack, axis=0))
            return maxpool(x)

        def absolute_(x):
            self.parts.append(x.data > 0)
            return absolute(x)

        T.conv2d, T.relu, T.maxpool2d, T.absolute = conv2d, relu_, maxpool2d, absolute_
        return self

    def __exit__(self, *exc):
        T.conv2d, T.relu, T.maxpool2d, T.absolute = self._orig

    @classmethod
    def pattern(cls, fn, arrays):
        with cls() as probe:
            fn(*[Tensor(a) for a in arrays])
        return probe.parts


def same_piece(fn, arrays, i, j, eps=EPS) -> bool:
    plus = [a.copy() for a in arrays]
    minus = [a.copy() for a in arrays]
    plus[i].reshape(-1)[j] += eps
    minus[i].reshape(-1)[j] -= eps
    a, b = KinkProbe.pattern(fn, plus), KinkProbe.pattern(fn, minus)
    return len(a) == len(b) and all(np.array_equal(p, q) for p, q in zip(a, b))


def check_gradients_piecewise(fn, arrays, n_valid: int = 12, seed: int = 0, eps: float = EPS):
    """Like ``check_gradients`` but only on coordinates whose FD interval stays on one linear piece.

    Deep ReLU/max-pool graphs have so many kinks that a fixed ``eps`` step
    crosses one for many coordinates; there the difference quotient is not
    an estimate of the derivative at all.  Coordinates are visited in random
    order until ``n_valid`` kink-free ones have been compared.
    Returns ``(worst_rel_error, checked, skipped)``.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with GradTape() as tape:
        loss = fn(*tensors)
    grads = tape.gradient(loss, tensors)

    def value(vals):
        return fn(*[Tensor(v) for v in vals]).item()

    rng = np.random.default_rng(seed)
    coords = [(i, j) for i, a in enumerate(arrays) for j in range(a.size)]
    worst, checked, skipped = 0.0, 0, 0
    for k in rng.permutation(len(coords)):
        if checked == n_valid:
            break
        i, j = coords[k]
        if not same_piece(fn, arrays, i, j, eps):
            skipped += 1
            continue
        plus = [x.copy() for x in arrays]
        minus = [x.copy() for x in arrays]
        plus[i].reshape(-1)[j] += eps
        minus[i].reshape(-1)[j] -= eps
        numeric = (value(plus) - value(minus)) / (2 * eps)
        worst = max(worst, rel_error(grads[i].reshape(-1)[j], numeric))
        checked += 1
    return worst, checked, skipped
