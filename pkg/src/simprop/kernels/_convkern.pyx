# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels.

Same contracts as simprop.kernels.pyref. Inner loops run over output
columns with independent accumulators so the compiler can vectorize them
without reassociating any floating-point sum; results are deterministic
and independent of thread count (the kernels are single-threaded).
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND_NAME = "compiled"


cdef inline Py_ssize_t _out_size(Py_ssize_t n, Py_ssize_t k, Py_ssize_t stride,
                                 Py_ssize_t dilation, Py_ssize_t padding) nogil:
    return (n + 2 * padding - dilation * (k - 1) - 1) // stride + 1


cdef void _forward(const float[:, :, ::1] xp, const float[:, :, :, ::1] w,
                   float[:, :, ::1] out, Py_ssize_t stride, Py_ssize_t dilation) nogil:
    cdef Py_ssize_t cout = w.shape[0], cin = w.shape[1], k = w.shape[2]
    cdef Py_ssize_t ho = out.shape[1], wo = out.shape[2]
    cdef Py_ssize_t o, c, i, j, oy, ox
    cdef float wv
    cdef const float* xrow
    cdef float* orow
    for o in range(cout):
        for c in range(cin):
            for i in range(k):
                for j in range(k):
                    wv = w[o, c, i, j]
                    for oy in range(ho):
                        xrow = &xp[c, oy * stride + i * dilation, j * dilation]
                        orow = &out[o, oy, 0]
                        if stride == 1:
                            for ox in range(wo):
                                orow[ox] += wv * xrow[ox]
                        else:
                            for ox in range(wo):
                                orow[ox] += wv * xrow[ox * stride]


cdef void _backward_input(const float[:, :, ::1] gy, const float[:, :, :, ::1] w,
                          float[:, :, ::1] gxp, Py_ssize_t stride, Py_ssize_t dilation) nogil:
    cdef Py_ssize_t cout = w.shape[0], cin = w.shape[1], k = w.shape[2]
    cdef Py_ssize_t ho = gy.shape[1], wo = gy.shape[2]
    cdef Py_ssize_t o, c, i, j, oy, ox
    cdef float wv
    cdef const float* gyrow
    cdef float* gxrow
    for o in range(cout):
        for c in range(cin):
            for i in range(k):
                for j in range(k):
                    wv = w[o, c, i, j]
                    for oy in range(ho):
                        gxrow = &gxp[c, oy * stride + i * dilation, j * dilation]
                        gyrow = &gy[o, oy, 0]
                        if stride == 1:
                            for ox in range(wo):
                                gxrow[ox] += wv * gyrow[ox]
                        else:
                            for ox in range(wo):
                                gxrow[ox * stride] += wv * gyrow[ox]


cdef void _backward_weight(const float[:, :, ::1] gy, const float[:, :, ::1] xp,
                           float[:, :, :, ::1] gw, float[::1] buf,
                           Py_ssize_t stride, Py_ssize_t dilation) nogil:
    cdef Py_ssize_t cout = gw.shape[0], cin = gw.shape[1], k = gw.shape[2]
    cdef Py_ssize_t ho = gy.shape[1], wo = gy.shape[2]
    cdef Py_ssize_t o, c, i, j, oy, ox
    cdef float acc
    cdef const float* gyrow
    cdef const float* xrow
    for o in range(cout):
        for c in range(cin):
            for i in range(k):
                for j in range(k):
                    # Column-wise partial sums keep the inner loop vectorizable;
                    # the final reduction runs left-to-right for a fixed order.
                    for ox in range(wo):
                        buf[ox] = 0.0
                    for oy in range(ho):
                        gyrow = &gy[o, oy, 0]
                        xrow = &xp[c, oy * stride + i * dilation, j * dilation]
                        if stride == 1:
                            for ox in range(wo):
                                buf[ox] += gyrow[ox] * xrow[ox]
                        else:
                            for ox in range(wo):
                                buf[ox] += gyrow[ox] * xrow[ox * stride]
                    acc = 0.0
                    for ox in range(wo):
                        acc += buf[ox]
                    gw[o, c, i, j] = acc


def conv2d_forward(x, w, Py_ssize_t stride, Py_ssize_t dilation, Py_ssize_t padding):
    """x: (Cin,H,W), w: (Cout,Cin,k,k) -> (Cout,Ho,Wo). Bias is applied by the caller."""
    cdef Py_ssize_t k = w.shape[2]
    cdef Py_ssize_t ho = _out_size(x.shape[1], k, stride, dilation, padding)
    cdef Py_ssize_t wo = _out_size(x.shape[2], k, stride, dilation, padding)
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    cdef const float[:, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float32)
    cdef const float[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float32)
    out = np.zeros((w.shape[0], ho, wo), dtype=np.float32)
    cdef float[:, :, ::1] ov = out
    with nogil:
        _forward(xv, wv, ov, stride, dilation)
    return out


def conv2d_backward_input(gy, w, x_shape, Py_ssize_t stride, Py_ssize_t dilation,
                          Py_ssize_t padding):
    cdef Py_ssize_t cin = x_shape[0], h = x_shape[1], wd = x_shape[2]
    gxp = np.zeros((cin, h + 2 * padding, wd + 2 * padding), dtype=np.float32)
    cdef const float[:, :, ::1] gyv = np.ascontiguousarray(gy, dtype=np.float32)
    cdef const float[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float32)
    cdef float[:, :, ::1] gv = gxp
    with nogil:
        _backward_input(gyv, wv, gv, stride, dilation)
    if padding:
        return np.ascontiguousarray(gxp[:, padding : padding + h, padding : padding + wd])
    return gxp


def conv2d_backward_weight(gy, x, w_shape, Py_ssize_t stride, Py_ssize_t dilation,
                           Py_ssize_t padding):
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    cdef const float[:, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float32)
    cdef const float[:, :, ::1] gyv = np.ascontiguousarray(gy, dtype=np.float32)
    gw = np.empty(tuple(w_shape), dtype=np.float32)
    cdef float[:, :, :, ::1] gwv = gw
    buf = np.empty(gy.shape[2], dtype=np.float32)
    cdef float[::1] bufv = buf
    with nogil:
        _backward_weight(gyv, xv, gwv, bufv, stride, dilation)
    return gw
