"""Single-pass pixel scoring.

Every method runs one forward pass and at most one backward pass, then
reduces the result to a nonnegative map with the input's spatial shape.
"""
from __future__ import annotations

import numpy as np

from . import micronet as mn
from .tensor import resize_bilinear_2d, resize_trilinear_3d

VANILLA = "vanilla"
GUIDED_VANILLA = "guided_vanilla"
INPUT_X_GRADIENT = "input_x_gradient"
RELU_ACTIVATION = "relu_activation"
GRAD_CAM = "grad_cam"
GUIDED_GRAD_CAM = "guided_grad_cam"
GRAD_CAM_PP = "grad_cam_pp"
ACT_X_GRAD_CAM = "act_x_grad_cam"
GUIDED_ACT_X_GRAD_CAM = "guided_act_x_grad_cam"

METHODS = (
    VANILLA,
    GUIDED_VANILLA,
    INPUT_X_GRADIENT,
    RELU_ACTIVATION,
    GRAD_CAM,
    GUIDED_GRAD_CAM,
    GRAD_CAM_PP,
    ACT_X_GRAD_CAM,
    GUIDED_ACT_X_GRAD_CAM,
)

_CAM_EPS = 1e-8


def channel_reduce(x: np.ndarray) -> np.ndarray:
    """Sum of absolute values over the leading channel axis."""
    return np.abs(x).sum(axis=0)


def upsample(cam: np.ndarray, spatial) -> np.ndarray:
    """Bilinear (2D) or trilinear (3D) resize of a channel-less map."""
    if cam.ndim == 2:
        return resize_bilinear_2d(cam[None], *spatial)[0]
    return resize_trilinear_3d(cam[None], *spatial)[0]


def _spatial_axes(a):
    return tuple(range(1, a.ndim))


def _bcast(v, a):
    return v.reshape((-1,) + (1,) * (a.ndim - 1))


def grad_cam_map(acts, grads):
    """relu(sum_k mean(dA_k) A_k) at tap resolution."""
    alpha = grads.mean(axis=_spatial_axes(grads), dtype=np.float64)
    return np.maximum((_bcast(alpha, acts) * acts).sum(axis=0), 0)


def grad_cam_pp_map(acts, grads):
    """Grad-CAM++ closed form: alpha = g^2 / (2 g^2 + sum(A) g^3 + eps)."""
    g = grads.astype(np.float64)
    a = acts.astype(np.float64)
    g2, g3 = g * g, g * g * g
    sum_a = a.sum(axis=_spatial_axes(a))
    weights = g2 / (2.0 * g2 + _bcast(sum_a, a) * g3 + _CAM_EPS)
    alpha = (weights * np.maximum(g, 0)).sum(axis=_spatial_axes(g))
    return np.maximum((_bcast(alpha, a) * a).sum(axis=0), 0)


def act_x_grad_cam_map(acts, grads):
    """relu(sum_k mean(A_k * dA_k) A_k)."""
    beta = (acts.astype(np.float64) * grads).mean(axis=_spatial_axes(acts))
    return np.maximum((_bcast(beta, acts) * acts).sum(axis=0), 0)


_CAMS = {
    GRAD_CAM: grad_cam_map,
    GUIDED_GRAD_CAM: grad_cam_map,
    GRAD_CAM_PP: grad_cam_pp_map,
    ACT_X_GRAD_CAM: act_x_grad_cam_map,
    GUIDED_ACT_X_GRAD_CAM: act_x_grad_cam_map,
}


def pixel_scores(net: mn.Network, x: np.ndarray, target_class: int, method: str, source: str = "logit") -> np.ndarray:
    """Nonnegative per-pixel (or per-voxel) importance for ``target_class``.

    ``source`` picks the differentiated quantity: the class logit (default)
    or its softmax probability. ``relu_activation`` is class independent.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    if not 0 <= target_class < net.num_classes:
        raise IndexError(f"class {target_class} outside [0, {net.num_classes})")
    x = np.asarray(x, np.float32)
    spatial = x.shape[1:]
    trace = mn.forward(net, x)

    if method == RELU_ACTIVATION:
        acts = mn._from_internal(trace.tap, 1)
        out = upsample(acts.sum(axis=0), spatial)
    elif method in (VANILLA, INPUT_X_GRADIENT):
        g, _ = mn.backward(net, trace, target_class, mn.STANDARD, source=source)
        out = channel_reduce(g if method == VANILLA else x * g)
    elif method == GUIDED_VANILLA:
        g, _ = mn.backward(net, trace, target_class, mn.GUIDED, source=source)
        out = channel_reduce(g)
    else:
        guided = method.startswith("guided")
        # no ReLU sits above the tap, so one guided pass also yields the
        # standard tap gradient the CAM needs
        g, tap_grad = mn.backward(
            net, trace, target_class, mn.GUIDED if guided else mn.STANDARD, stop_at_tap=not guided, source=source
        )
        acts = mn._from_internal(trace.tap, 1)
        cam = upsample(_CAMS[method](acts, tap_grad).astype(np.float32), spatial)
        out = channel_reduce(g) * cam if guided else cam
    out = np.abs(np.asarray(out, np.float32))
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"{method} produced non-finite scores")
    return out
