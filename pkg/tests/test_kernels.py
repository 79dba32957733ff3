"""Both conv backends against the nested-loop oracle, and each other."""

import numpy as np
import pytest

from simprop.kernels import pyref
from oracles import conv2d_oracle, conv2d_input_grad_oracle, conv2d_weight_grad_oracle

try:
    from simprop.kernels import _convkern
    BACKENDS = [pyref, _convkern]
except ImportError:
    _convkern = None
    BACKENDS = [pyref]

ids = [b.BACKEND_NAME for b in BACKENDS]

CASES = [
    # (cin, cout, h, w, k, stride, dilation, padding)
    (3, 4, 7, 7, 3, 1, 1, 1),
    (2, 5, 8, 6, 3, 2, 1, 1),
    (4, 3, 9, 9, 3, 1, 2, 2),
    (2, 2, 11, 7, 3, 2, 2, 2),
    (3, 2, 5, 5, 1, 1, 1, 0),
    (1, 1, 6, 8, 3, 1, 4, 4),
    (2, 3, 7, 7, 5, 1, 1, 2),
]


def _rel(a, b):
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-12)


@pytest.mark.parametrize("backend", BACKENDS, ids=ids)
@pytest.mark.parametrize("case", CASES)
def test_forward_matches_oracle(backend, case):
    cin, cout, h, w, k, stride, dilation, padding = case
    rng = np.random.default_rng(hash(case) % 2**32)
    x = rng.standard_normal((cin, h, w), dtype=np.float32)
    wt = rng.standard_normal((cout, cin, k, k), dtype=np.float32)
    y = backend.conv2d_forward(x, wt, stride, dilation, padding)
    ref = conv2d_oracle(x, wt, None, stride, dilation, padding)
    assert y.shape == ref.shape
    assert y.dtype == np.float32
    assert _rel(y, ref) <= 1e-5


@pytest.mark.parametrize("backend", BACKENDS, ids=ids)
@pytest.mark.parametrize("case", CASES)
def test_backward_matches_oracle(backend, case):
    cin, cout, h, w, k, stride, dilation, padding = case
    rng = np.random.default_rng(hash(case) % 2**31)
    x = rng.standard_normal((cin, h, w), dtype=np.float32)
    wt = rng.standard_normal((cout, cin, k, k), dtype=np.float32)
    y = backend.conv2d_forward(x, wt, stride, dilation, padding)
    gy = rng.standard_normal(y.shape, dtype=np.float32)

    gx = backend.conv2d_backward_input(gy, wt, x.shape, stride, dilation, padding)
    gw = backend.conv2d_backward_weight(gy, x, wt.shape, stride, dilation, padding)
    assert _rel(gx, conv2d_input_grad_oracle(gy, wt, x.shape, stride, dilation, padding)) <= 1e-5
    assert _rel(gw, conv2d_weight_grad_oracle(gy, x, wt.shape, stride, dilation, padding)) <= 1e-5


@pytest.mark.skipif(_convkern is None, reason="compiled extension not built")
@pytest.mark.parametrize("case", CASES)
def test_backends_agree(case):
    cin, cout, h, w, k, stride, dilation, padding = case
    rng = np.random.default_rng(hash(case) % 2**30)
    x = rng.standard_normal((cin, h, w), dtype=np.float32)
    wt = rng.standard_normal((cout, cin, k, k), dtype=np.float32)
    yp = pyref.conv2d_forward(x, wt, stride, dilation, padding)
    yc = _convkern.conv2d_forward(x, wt, stride, dilation, padding)
    assert _rel(yp, yc) <= 1e-5


@pytest.mark.parametrize("backend", BACKENDS, ids=ids)
def test_forward_deterministic(backend):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((8, 16, 16), dtype=np.float32)
    wt = rng.standard_normal((8, 8, 3, 3), dtype=np.float32)
    a = backend.conv2d_forward(x, wt, 1, 1, 1)
    b = backend.conv2d_forward(x, wt, 1, 1, 1)
    assert np.array_equal(a, b)
