"""Pure-numpy convolution kernels.

Fallback backend used when the compiled extension is unavailable (or when
forced via SIMPROP_KERNELS=python). The forward/backward passes decompose
the convolution into one GEMM per kernel tap, which keeps the summation
order fixed and the results deterministic run-to-run.
"""

import numpy as np

BACKEND_NAME = "python"


def _out_size(n: int, k: int, stride: int, dilation: int, padding: int) -> int:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d_forward(x, w, stride: int, dilation: int, padding: int):
    """x: (Cin,H,W), w: (Cout,Cin,k,k) -> (Cout,Ho,Wo). Bias is applied by the caller."""
    cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    ho = _out_size(h, k, stride, dilation, padding)
    wo = _out_size(wd, k, stride, dilation, padding)
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    out = np.zeros((cout, ho, wo), dtype=np.float32)
    for i in range(k):
        for j in range(k):
            patch = xp[
                :,
                i * dilation : i * dilation + (ho - 1) * stride + 1 : stride,
                j * dilation : j * dilation + (wo - 1) * stride + 1 : stride,
            ]
            out += np.tensordot(w[:, :, i, j], patch, axes=1)
    return out


def conv2d_backward_input(gy, w, x_shape, stride: int, dilation: int, padding: int):
    cin, h, wd = x_shape
    cout, _, k, _ = w.shape
    _, ho, wo = gy.shape
    gxp = np.zeros((cin, h + 2 * padding, wd + 2 * padding), dtype=np.float32)
    for i in range(k):
        for j in range(k):
            gxp[
                :,
                i * dilation : i * dilation + (ho - 1) * stride + 1 : stride,
                j * dilation : j * dilation + (wo - 1) * stride + 1 : stride,
            ] += np.tensordot(w[:, :, i, j].T, gy, axes=1)
    if padding:
        return np.ascontiguousarray(gxp[:, padding : padding + h, padding : padding + wd])
    return gxp


def conv2d_backward_weight(gy, x, w_shape, stride: int, dilation: int, padding: int):
    cout, cin, k, _ = w_shape
    _, ho, wo = gy.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    gw = np.empty(w_shape, dtype=np.float32)
    for i in range(k):
        for j in range(k):
            patch = xp[
                :,
                i * dilation : i * dilation + (ho - 1) * stride + 1 : stride,
                j * dilation : j * dilation + (wo - 1) * stride + 1 : stride,
            ]
            gw[:, :, i, j] = np.tensordot(gy, patch, axes=([1, 2], [1, 2]))
    return gw
