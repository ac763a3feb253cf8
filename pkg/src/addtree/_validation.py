"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np

from .space import PointError, StructuredPoint, TreeSpec, delinearize


def check_points(spec: TreeSpec, X, tol: float = 1e-9) -> list[StructuredPoint]:
    """Coerce ``X`` to a list of valid points of ``spec``.

    ``X`` is either a sequence of :class:`StructuredPoint` or a 2-D array of
    linearized rows.
    """
    if isinstance(X, np.ndarray) or (
        len(X) and not isinstance(X[0], StructuredPoint)
    ):
        arr = np.asarray(X, dtype=float)
        if arr.ndim != 2:
            raise ValueError(f"expected a 2-D array of linearized points, got shape {arr.shape}")
        points = [delinearize(spec, row) for row in arr]
    else:
        points = list(X)
    if not points:
        raise ValueError("no points given")
    for k, p in enumerate(points):
        if not isinstance(p, StructuredPoint):
            raise TypeError(f"item {k} is {type(p).__name__}, not StructuredPoint")
        try:
            spec.validate(p, tol)
        except PointError as exc:
            raise ValueError(f"point {k} is invalid: {exc}") from None
    return points


def check_target(y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.ndim != 1:
        y = y.reshape(-1) if y.ndim == 2 and 1 in y.shape else y
    if y.ndim != 1 or y.size != n:
        raise ValueError(f"expected {n} targets, got shape {np.shape(y)}")
    if not np.all(np.isfinite(y)):
        raise ValueError("targets must be finite")
    return y
