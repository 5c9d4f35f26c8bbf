from __future__ import annotations

import numpy as np
import pytest

from datadrop import backend
from datadrop.data import Dataset


@pytest.fixture(params=backend.available())
def each_backend(request):
    with backend.use_backend(request.param):
        yield request.param


def make_dataset(X, y, ids=None):
    X = np.asarray(X, dtype=float)
    if ids is None:
        ids = np.arange(len(X))
    return Dataset(X, np.asarray(y, dtype=float), ids)
