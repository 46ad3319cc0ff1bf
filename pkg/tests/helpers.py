"""Independent reference computations shared by the test modules.

Nothing here touches the graph engine: forward passes are plain numpy and
derivatives are central finite differences of those forward passes.
"""

import numpy as np


def mlp_forward(x, weights, biases):
    """Plain tanh MLP with a linear last layer; ``x`` is (N, n)."""
    h = np.asarray(x, dtype=float)
    for W, b in zip(weights[:-1], biases[:-1]):
        h = np.tanh(h @ W + b)
    return (h @ weights[-1] + biases[-1])[:, 0]


def unpack_mlp(store, depth):
    Ws = [store.view(f"hidden.{i}.W") for i in range(depth)] + [store.view("out.W")]
    bs = [store.view(f"hidden.{i}.b") for i in range(depth)] + [store.view("out.b")]
    return Ws, bs


def fd_gradient(f, x, h=1e-4):
    """Central-difference gradient of a batched scalar function ``f``: (N, n) -> (N,)."""
    x = np.asarray(x, dtype=float)
    g = np.empty_like(x)
    for k in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[k] = h
        g[:, k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def fd_laplacian(f, x, h=1e-4):
    x = np.asarray(x, dtype=float)
    f0 = f(x)
    lap = np.zeros(x.shape[0])
    for k in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[k] = h
        lap += (f(x + e) - 2 * f0 + f(x - e)) / h**2
    return lap


def fd_divergence(flux, x, h=1e-4):
    """Central-difference divergence of a vector field ``flux``: (N, n) -> (N, n)."""
    x = np.asarray(x, dtype=float)
    div = np.zeros(x.shape[0])
    for k in range(x.shape[1]):
        e = np.zeros(x.shape[1])
        e[k] = h
        div += (flux(x + e)[:, k] - flux(x - e)[:, k]) / (2 * h)
    return div


def fd_param_gradient(loss_of_values, values, h=1e-5, indices=None):
    """Central differences of ``loss_of_values(flat)`` along chosen coordinates."""
    values = np.array(values, dtype=float)
    if indices is None:
        indices = range(values.size)
    out = []
    for i in indices:
        old = values[i]
        values[i] = old + h
        up = loss_of_values(values)
        values[i] = old - h
        down = loss_of_values(values)
        values[i] = old
        out.append((up - down) / (2 * h))
    return np.array(out)


def fd_directional(loss_of_values, values, direction, h=1e-5):
    values = np.asarray(values, dtype=float)
    return (loss_of_values(values + h * direction) - loss_of_values(values - h * direction)) / (2 * h)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def mlp_derivatives(x, weights, biases):
    """Value, input gradient (N, n) and Laplacian of a tanh MLP by hand-written forward mode.

    For ``h = tanh(z)`` with ``s = 1 - h^2``: ``dh = s dz`` and
    ``lap h = s lap z - 2 h s |dz|^2``.
    """
    h = np.asarray(x, dtype=float)
    N, n = h.shape
    J = np.broadcast_to(np.eye(n), (N, n, n)).copy()  # d h_j / d x_k as (N, k, j)
    L = np.zeros((N, n))
    for W, b in zip(weights[:-1], biases[:-1]):
        z, Jz, Lz = h @ W + b, J @ W, L @ W
        h = np.tanh(z)
        s = 1.0 - h * h
        J = s[:, None, :] * Jz
        L = s * Lz - 2.0 * h * s * np.sum(Jz * Jz, axis=1)
    W, b = weights[-1], biases[-1]
    return (h @ W + b)[:, 0], (J @ W)[:, :, 0], (L @ W)[:, 0]
