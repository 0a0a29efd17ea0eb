"""Central finite-difference oracle shared by the gradient tests."""
import numpy as np

from pets import autodiff as ad

H = 1e-5
TOL = 1e-4
# Central differences carry roundoff of order eps*|loss|/h ~ 1e-11; gradients whose
# magnitude is below this floor (e.g. attention key biases, which softmax shift
# invariance makes exactly zero) are compared on the floor's scale instead.
FLOOR = 1e-6


def numeric_grad(f, tensors, h=H):
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        it = np.nditer(t.data, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = t.data[i]
            t.data[i] = old + h
            up = f().item()
            t.data[i] = old - h
            down = f().item()
            t.data[i] = old
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_rel_error(f, tensors, h=H):
    """Largest ``max|analytic − numeric| / max|numeric|`` over the given leaf tensors."""
    for t in tensors:
        t.grad = None
    loss = f()
    ad.backward(loss)
    worst = 0.0
    for t, num in zip(tensors, numeric_grad(f, tensors, h)):
        ana = np.zeros_like(num) if t.grad is None else t.grad
        scale = max(np.abs(num).max(), np.abs(ana).max(), FLOOR)
        worst = max(worst, float(np.abs(ana - num).max() / scale))
    return worst
