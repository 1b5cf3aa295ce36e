"""Pure-numpy versions of the fused elementwise kernels.

Every function mirrors the operation order of the compiled module exactly so
the two backends produce bit-identical parameters.  Arrays are operated on in
place; masks are uint8 arrays holding 0 or 1.
"""
import numpy as np


def blend(live, snap, mask, out):
    np.copyto(out, np.where(mask != 0, live, snap))
    return out


def gate(grad, mask):
    grad[mask == 0] = 0.0
    return grad


def relu_forward(z, scale, out):
    # scale is None or the inverted-dropout multiplier per entry
    np.copyto(out, np.where(z > 0.0, z, 0.0))
    if scale is not None:
        out *= scale
    return out


def relu_backward(delta, z, scale, out):
    np.copyto(out, np.where(z > 0.0, delta, 0.0))
    if scale is not None:
        out *= scale
    return out


def masked_adam(param, grad, m, v, mask, lr, b1, b2, eps, bc1, bc2):
    on = mask != 0
    g = np.where(on, grad, 0.0)
    m *= b1
    m += (1.0 - b1) * g
    v *= b2
    v += (1.0 - b2) * (g * g)
    step = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    np.copyto(param, np.where(on, param - step, param))
    return param


def masked_sgd(param, grad, mask, lr):
    np.copyto(param, np.where(mask != 0, param - lr * grad, param))
    return param
