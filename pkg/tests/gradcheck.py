"""Central finite-difference oracle shared by the gradient tests."""
import numpy as np

from karm import autodiff as ad

STEP = 1e-5


def numeric_grad(f, x: np.ndarray, step: float = STEP) -> np.ndarray:
    """d f(x) / dx by central differences; ``f`` maps an array to a float."""
    x = x.astype(np.float64).copy()
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + step
        hi = f(x)
        x[i] = old - step
        lo = f(x)
        x[i] = old
        g[i] = (hi - lo) / (2 * step)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / denom)


def check(build, inputs: list[np.ndarray]) -> float:
    """Worst relative error over all inputs of a scalar graph ``build(*tensors)``."""
    tensors = [ad.Tensor(x.copy(), requires_grad=True) for x in inputs]
    ad.backward(build(*tensors))
    worst = 0.0
    for k, x in enumerate(inputs):
        def f(v, k=k):
            args = [ad.Tensor(v) if j == k else ad.Tensor(inputs[j]) for j in range(len(inputs))]
            return float(build(*args).data)
        worst = max(worst, rel_error(tensors[k].grad, numeric_grad(f, x)))
    return worst
