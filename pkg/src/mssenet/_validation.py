"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np

from .dsp import N_COEFFS


def check_mfcc_sequences(X, n_coeffs: int = N_COEFFS) -> list[np.ndarray]:
    """Coerce ``X`` to a list of finite ``[T_i, n_coeffs]`` float arrays.

    Accepts a 3-D array ``[n, T, n_coeffs]`` or any sequence of 2-D arrays
    (lengths may differ).
    """
    if isinstance(X, np.ndarray) and X.ndim == 3:
        seqs = list(X)
    elif isinstance(X, np.ndarray) and X.ndim == 2:
        raise ValueError(
            "expected a batch of MFCC matrices; got a single 2-D array. "
            "Wrap it in a list if it is one utterance.")
    else:
        try:
            seqs = list(X)
        except TypeError:
            raise TypeError(f"expected a sequence of MFCC matrices, got {type(X).__name__}") from None
    if not seqs:
        raise ValueError("empty input: need at least one MFCC matrix")
    out = []
    for i, s in enumerate(seqs):
        a = np.asarray(getattr(s, "coeffs", s), dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != n_coeffs:
            raise ValueError(f"sample {i}: expected shape (T, {n_coeffs}), got {a.shape}")
        if a.shape[0] < 1:
            raise ValueError(f"sample {i}: no frames")
        if not np.all(np.isfinite(a)):
            raise ValueError(f"sample {i}: contains NaN or infinity")
        out.append(a)
    return out


def check_labels(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1:
        raise ValueError(f"y must be 1-D, got shape {y.shape}")
    if y.shape[0] != n_samples:
        raise ValueError(f"X has {n_samples} samples but y has {y.shape[0]}")
    return y
