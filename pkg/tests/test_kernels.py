import os
import subprocess
import sys

import numpy as np
import pytest

from daedalus import _kernels
from daedalus._kernels import _pure

compiled = pytest.importorskip("daedalus._kernels._nms")


def corners(rng, n):
    cx, cy = rng.uniform(0, 64, n), rng.uniform(0, 64, n)
    w, h = rng.uniform(0, 20, n), rng.uniform(0, 20, n)
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


@pytest.mark.parametrize("n", [0, 1, 7, 150])
def test_backends_bit_identical(n):
    rng = np.random.default_rng(n)
    x1, y1, x2, y2 = corners(rng, n)
    scores = rng.random(n)
    order = np.argsort(-scores, kind="stable").astype(np.intp)
    a = _pure.iou_matrix(x1, y1, x2, y2, x1, y1, x2, y2)
    b = compiled.iou_matrix(x1, y1, x2, y2, x1, y1, x2, y2)
    assert a.tobytes() == b.tobytes()
    np.testing.assert_array_equal(_pure.nms_sorted(x1, y1, x2, y2, order, 0.4),
                                  compiled.nms_sorted(x1, y1, x2, y2, order, 0.4))
    for gaussian in (0, 1):
        ka, sa = _pure.soft_nms(x1, y1, x2, y2, scores, 0.3, gaussian, 0.5, 0.001)
        kb, sb = compiled.soft_nms(x1, y1, x2, y2, scores, 0.3, gaussian, 0.5, 0.001)
        np.testing.assert_array_equal(ka, kb)
        assert sa.tobytes() == sb.tobytes()


def test_default_backend_is_compiled():
    assert _kernels.BACKEND == "cython"


def test_pure_backend_selectable_by_env():
    env = dict(os.environ, DAEDALUS_PURE="1")
    out = subprocess.run([sys.executable, "-c", "import daedalus; print(daedalus.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "pure"
