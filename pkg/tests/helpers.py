"""Shared oracles for the test suite, chiefly finite-difference gradients.

The finite-difference path never touches the engine's backward machinery:
it only needs repeated forward evaluations, so agreement between the two
routes is an independent check of the differentiation graph.
"""

from __future__ import annotations

import numpy as np

from bipartite_gan import engine as eng


def rel_error(g_ad: np.ndarray, g_fd: np.ndarray) -> float:
    """Max elementwise difference, scaled by the larger gradient magnitude.

    The 1e-3 floor keeps near-zero gradients from inflating the ratio with
    finite-difference noise.
    """
    g_ad = np.asarray(g_ad, dtype=np.float64)
    g_fd = np.asarray(g_fd, dtype=np.float64)
    scale = max(np.abs(g_ad).max(initial=0.0), np.abs(g_fd).max(initial=0.0), 1e-3)
    return float(np.abs(g_ad - g_fd).max(initial=0.0) / scale)


def finite_difference(f, arrays: list[np.ndarray], rel_h: float) -> list[np.ndarray]:
    """Central-difference gradients of scalar f(*arrays) w.r.t. every entry.

    Arrays are perturbed in place one coordinate at a time and restored;
    the divided difference uses the actually representable step.
    """
    grads = []
    for a in arrays:
        g = np.zeros(a.shape, dtype=np.float64)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = rel_h * max(1.0, abs(float(orig)))
            flat[i] = orig + h
            hi_x = float(flat[i])
            fp = f(*arrays)
            flat[i] = orig - h
            lo_x = float(flat[i])
            fm = f(*arrays)
            flat[i] = orig
            gflat[i] = (fp - fm) / (hi_x - lo_x)
        grads.append(g)
    return grads


def finite_difference_at(f, arrays, coords: list[list[tuple]], rel_h: float):
    """Central differences at selected coordinates only.

    coords[k] lists index tuples into arrays[k]. Returns, per array, the
    list of divided differences in the same order.
    """
    out = []
    for a, idxs in zip(arrays, coords):
        vals = []
        for ix in idxs:
            orig = a[ix]
            h = rel_h * max(1.0, abs(float(orig)))
            a[ix] = orig + h
            hi_x = float(a[ix])
            fp = f(*arrays)
            a[ix] = orig - h
            lo_x = float(a[ix])
            fm = f(*arrays)
            a[ix] = orig
            vals.append((fp - fm) / (hi_x - lo_x))
        out.append(np.asarray(vals, dtype=np.float64))
    return out


def check_gradients(f_tensor, arrays, dtype=np.float64, rel_h=None, wrt=None) -> float:
    """Compare engine gradients of scalar f_tensor(*tensors) with central differences.

    Args:
        f_tensor: callable accepting Tensors, returning a scalar Tensor.
        arrays: numpy arrays for each input.
        dtype: working precision for both routes.
        rel_h: relative step; defaults to 1e-2 (f32) or 1e-5 (f64).
        wrt: optional subset of input positions to check.

    Returns:
        Worst relative error across the checked inputs.
    """
    dtype = np.dtype(dtype)
    if rel_h is None:
        rel_h = 1e-2 if dtype == np.float32 else 1e-5
    arrays = [np.array(a, dtype=dtype) for a in arrays]
    tensors = [eng.param(a.copy()) for a in arrays]
    loss = f_tensor(*tensors)
    grads = eng.backward(loss)

    def f_np(*arrs):
        # Inputs stay differentiable: some probed functions (gradient
        # penalties) run an inner backward as part of their forward value.
        return float(f_tensor(*[eng.param(a.copy()) for a in arrs]).data)

    positions = range(len(arrays)) if wrt is None else wrt
    fd_all = finite_difference(f_np, arrays, rel_h)
    worst = 0.0
    for k in positions:
        g_ad = grads.get(tensors[k])
        g_ad = np.zeros(arrays[k].shape) if g_ad is None else g_ad.data
        worst = max(worst, rel_error(g_ad, fd_all[k]))
    return worst


def sample_coords(shape: tuple, count: int, rng: np.random.Generator) -> list[tuple]:
    """Distinct random index tuples into an array of the given shape."""
    size = int(np.prod(shape)) if shape else 1
    count = min(count, size)
    picks = rng.choice(size, size=count, replace=False)
    return [tuple(np.unravel_index(int(p), shape)) if shape else () for p in picks]
