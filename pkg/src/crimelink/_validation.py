"""Input checks shared by the estimator wrappers."""

from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


def check_binary_matrix(X, name: str = "X") -> np.ndarray:
    X = check_array(X, dtype=None, ensure_2d=True, ensure_min_samples=1)
    if not np.isin(X, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0/1 values")
    return X.astype(np.uint8)


def check_spacetime(spacetime, n: int) -> np.ndarray:
    """``(n, 3)`` array of x_km, y_km, t_days; zeros when omitted."""
    if spacetime is None:
        return np.zeros((n, 3))
    st = check_array(spacetime, dtype=float)
    if st.shape != (n, 3):
        raise ValueError(f"spacetime must have shape ({n}, 3), got {st.shape}")
    return st


def check_groups(y, n: int) -> list:
    """Series labels per case; ``None``, NaN or empty string marks a one-off."""
    if y is None:
        raise ValueError("series labels y are required for fitting")
    y = list(np.asarray(y, dtype=object).reshape(-1))
    if len(y) != n:
        raise ValueError(f"y has {len(y)} labels for {n} cases")
    out = []
    for v in y:
        if v is None or v == "" or (isinstance(v, float) and np.isnan(v)):
            out.append(None)
        else:
            out.append(str(v))
    return out


def check_pairs(pairs, n: int) -> tuple[np.ndarray, np.ndarray]:
    p = check_array(pairs, dtype=np.int64)
    if p.shape[1] != 2:
        raise ValueError("pairs must have two columns")
    if (p < 0).any() or (p >= n).any():
        raise ValueError(f"pair indices must lie in [0, {n})")
    return p[:, 0], p[:, 1]
