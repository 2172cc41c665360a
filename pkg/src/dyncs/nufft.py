"""Exact type-2 nonuniform DFT between image frames and arbitrary k-space coords.

The transform is evaluated as a direct double sum (dense matrix-vector
products), which at desk scale is fast, exactly linear in the image and
exactly differentiable in the sample coordinates. Conventions:

  * coordinates are angular frequencies in radians, each component in [-pi, pi];
  * image indices are centered: x in {-H//2, ..., H - H//2 - 1}, y likewise;
  * forward:  X[t,j] = sum_{x,y} z[t,x,y] * exp(-i (kx*x + ky*y))
  * adjoint:  z~[t,x,y] = 1/(H*W) * sum_j X[t,j] * exp(+i (kx*x + ky*y))

The 1/(H*W) scaling makes adjoint(forward(.)) the identity on a full
Cartesian frequency grid.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .autodiff import AutodiffError, Tensor


def _centered_axes(h, w):
    return np.arange(h) - h // 2, np.arange(w) - w // 2


def _flat_grid(h, w):
    xs, ys = _centered_axes(h, w)
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return gx.ravel().astype(np.float64), gy.ravel().astype(np.float64)


def _validate_coords(coords):
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim < 2 or coords.shape[-1] != 2:
        raise AutodiffError(f"coordinates must end in an (kx, ky) pair, got {coords.shape}")
    if np.any(np.abs(coords) > np.pi + 1e-12):
        raise AutodiffError("coordinate component outside [-pi, pi]")
    return coords


class _PhaseCache:
    """Keeps exp(-i phase) matrices for recently seen coordinate sets.

    Within one optimizer step the same trajectory is used by every batch
    element, forward and adjoint, so this avoids rebuilding the matrix.
    """

    def __init__(self, capacity=4):
        self.capacity = capacity
        self._store = {}

    def get(self, coords, h, w):
        key = (hashlib.sha1(coords.tobytes()).hexdigest(), coords.shape, h, w)
        hit = self._store.get(key)
        if hit is not None:
            return hit
        gx, gy = _flat_grid(h, w)
        flat = coords.reshape(-1, 2)
        phase = np.outer(flat[:, 0], gx) + np.outer(flat[:, 1], gy)
        e = np.exp(-1j * phase)  # [n_samples, H*W]
        if len(self._store) >= self.capacity:
            self._store.pop(next(iter(self._store)))
        self._store[key] = e
        return e


_cache = _PhaseCache()


def _per_frame_matrix(coords, t, h, w):
    """exp(-i phase) for frame t, shape [S*m, H*W]."""
    e = _cache.get(coords, h, w)
    n = coords[0].size // 2
    return e.reshape(coords.shape[0], n, h * w)[t]


def nudft_forward(z, coords):
    """z: [T,H,W] (real or complex); coords: [T,S,m,2] -> complex [T,S,m]."""
    z = np.asarray(z)
    coords = _validate_coords(coords)
    t_frames, h, w = z.shape
    if coords.shape[0] != t_frames:
        raise AutodiffError(f"frame count mismatch: image {t_frames}, coords {coords.shape[0]}")
    out = np.empty(coords.shape[:-1], dtype=np.complex128)
    for t in range(t_frames):
        e = _per_frame_matrix(coords, t, h, w)
        out[t] = (e @ z[t].ravel()).reshape(coords.shape[1:-1])
    return out


def nudft_adjoint(x, coords, out_shape):
    """x: complex [T,S,m]; returns complex image [T,H,W], scaled by 1/(H*W)."""
    x = np.asarray(x, dtype=np.complex128)
    coords = _validate_coords(coords)
    t_frames, h, w = out_shape
    if x.shape != coords.shape[:-1]:
        raise AutodiffError(f"sample shape {x.shape} does not match coords {coords.shape[:-1]}")
    out = np.empty((t_frames, h, w), dtype=np.complex128)
    for t in range(t_frames):
        e = _per_frame_matrix(coords, t, h, w)
        out[t] = (e.conj().T @ x[t].ravel()).reshape(h, w) / (h * w)
    return out


def nudft_grad_coords(z, coords, upstream):
    """Gradient of a real loss through the forward transform w.r.t. coords.

    `upstream` is the complex adjoint sensitivity dL/dX (real and imaginary
    parts being the partials of the real loss). Uses
    dX_j/dkx = sum (-i*x) z exp(-i phase) and grad = Re(conj(U) * dX/dk).
    """
    z = np.asarray(z)
    coords = _validate_coords(coords)
    upstream = np.asarray(upstream, dtype=np.complex128)
    t_frames, h, w = z.shape
    gx, gy = _flat_grid(h, w)
    grad = np.zeros_like(coords)
    for t in range(t_frames):
        e = _per_frame_matrix(coords, t, h, w)
        zf = z[t].ravel()
        dx = e @ (-1j * gx * zf)
        dy = e @ (-1j * gy * zf)
        u = upstream[t].ravel().conj()
        grad[t, ..., 0] = np.real(u * dx).reshape(coords.shape[1:-1])
        grad[t, ..., 1] = np.real(u * dy).reshape(coords.shape[1:-1])
    return grad


def _adjoint_grad_coords(x, coords, upstream, out_shape):
    """Coordinate gradient through the (scaled) adjoint transform.

    z~ = 1/(HW) sum_j X_j e^{+i phase_j}; with complex upstream image G,
    dL/dkx_j = 1/(HW) * Re( i X_j conj( forward(x*G)_j ) ).
    """
    x = np.asarray(x, dtype=np.complex128)
    upstream = np.asarray(upstream, dtype=np.complex128)
    t_frames, h, w = out_shape
    gx, gy = _flat_grid(h, w)
    grad = np.zeros_like(coords)
    scale = 1.0 / (h * w)
    for t in range(t_frames):
        e = _per_frame_matrix(coords, t, h, w)
        g = upstream[t].ravel()
        fx = e @ (gx * g)
        fy = e @ (gy * g)
        xf = x[t].ravel()
        grad[t, ..., 0] = scale * np.real(1j * xf * fx.conj()).reshape(coords.shape[1:-1])
        grad[t, ..., 1] = scale * np.real(1j * xf * fy.conj()).reshape(coords.shape[1:-1])
    return grad


# -- autodiff nodes -----------------------------------------------------------

def nudft_forward_op(z, coords):
    """Graph node: real image [T,H,W] x coords Tensor -> samples [2,T,S,m].

    `z` may be a plain array (constant ground truth) or a Tensor.
    """
    z_t = z if isinstance(z, Tensor) else Tensor(np.asarray(z, dtype=np.float64))
    zd = z_t.data
    cd = _validate_coords(coords.data)
    x = nudft_forward(zd, cd)
    data = np.stack([x.real, x.imag])
    t_frames, h, w = zd.shape

    def back(g):
        u = g[0] + 1j * g[1]
        gz = None
        if z_t.requires_grad:
            # forward is linear in z: grad_z = Re(unscaled adjoint of U)
            gz = np.real(nudft_adjoint(u, cd, zd.shape)) * (h * w)
        gc = nudft_grad_coords(zd, cd, u) if coords.requires_grad else None
        return (gz, gc)

    return Tensor.from_op(data, (z_t, coords), back)


def nudft_adjoint_op(xpair, coords, out_shape):
    """Graph node: samples Tensor [2,T,S,m] x coords Tensor -> image [2,T,H,W]."""
    cd = _validate_coords(coords.data)
    x = xpair.data[0] + 1j * xpair.data[1]
    zt = nudft_adjoint(x, cd, out_shape)
    data = np.stack([zt.real, zt.imag])
    h, w = out_shape[1], out_shape[2]

    def back(g):
        gu = g[0] + 1j * g[1]
        gx = None
        if xpair.requires_grad:
            fx = nudft_forward(gu, cd) / (h * w)
            gx = np.stack([fx.real, fx.imag])
        gc = _adjoint_grad_coords(x, cd, gu, out_shape) if coords.requires_grad else None
        return (gx, gc)

    return Tensor.from_op(data, (xpair, coords), back)


def cartesian_grid_coords(t_frames, h, w):
    """Full Cartesian frequency grid in radians, shaped [T, 1, H*W, 2]."""
    fx = 2.0 * np.pi * (np.arange(h) - h // 2) / h
    fy = 2.0 * np.pi * (np.arange(w) - w // 2) / w
    gx, gy = np.meshgrid(fx, fy, indexing="ij")
    frame = np.stack([gx.ravel(), gy.ravel()], axis=-1)
    return np.broadcast_to(frame, (t_frames, 1) + frame.shape).copy()
