import numpy as np
import pytest

from rctfusion.synthgen import Dataset


def make_dataset(a, y, source=1.0, **cols):
    """Tiny hand-built dataset; unspecified columns default to zeros."""
    a = np.asarray(a, dtype=float)
    y = np.asarray(y, dtype=float)
    n = a.shape[0]
    full = {
        name: np.asarray(cols[name], dtype=float) if name in cols else np.zeros(n)
        for name in ("x1", "x2", "x3", "x4", "u1", "u2", "z3", "y0", "y1", "n1", "n2", "n3")
    }
    return Dataset(a=a, y=y, s=np.full(n, float(source)), **full)


@pytest.fixture
def tiny():
    return make_dataset(a=[1.0, 0.0], y=[1.0, 0.0])
