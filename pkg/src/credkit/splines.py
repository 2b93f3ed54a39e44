"""Clamped one-dimensional B-spline bases and the penalized solver behind g(.).

A basis is built from data with interior knots at empirical quantiles and
repeated boundary knots, so evaluation outside the training range clamps to
the boundary value instead of exploding. Design matrices for several inputs
combine either additively (one block per input) or as a full tensor product;
both carry an explicit leading intercept column that the ridge penalty
leaves alone.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline
from scipy.linalg import cho_factor, cho_solve

from .errors import NumericError, ParameterError

DEGREE = 3


@dataclass(frozen=True)
class SplineBasis:
    """Cubic B-spline basis on a closed interval with clamped ends."""

    knots: tuple
    degree: int = DEGREE

    def __post_init__(self):
        t = np.asarray(self.knots, dtype=float)
        k = self.degree
        if k < 1:
            raise ParameterError("spline degree must be >= 1")
        if t.size < 2 * (k + 1):
            raise ParameterError("knot sequence too short for the degree")
        if not np.all(np.isfinite(t)):
            raise ParameterError("knots must be finite")
        if np.any(np.diff(t) < 0):
            raise ParameterError("knots must be non-decreasing")
        if not self.lo < self.hi:
            raise ParameterError("basis interval has zero length")
        interior = t[k + 1:-(k + 1)]
        if interior.size and np.any(np.diff(interior) <= 0):
            raise ParameterError("interior knots must be strictly increasing")

    @property
    def lo(self) -> float:
        return float(self.knots[self.degree])

    @property
    def hi(self) -> float:
        return float(self.knots[-self.degree - 1])

    @property
    def size(self) -> int:
        return len(self.knots) - self.degree - 1

    @classmethod
    def from_data(cls, x, interior: int = 8, degree: int = DEGREE) -> "SplineBasis":
        """Build a clamped basis with interior knots at quantiles of `x`.

        Quantiles that collide with each other or with the range ends are
        dropped, so heavily tied inputs (integer counts, say) get fewer
        interior knots than requested rather than an invalid sequence.
        """
        x = np.asarray(x, dtype=float)
        if x.size == 0 or not np.all(np.isfinite(x)):
            raise ParameterError("basis input must be non-empty and finite")
        lo, hi = float(np.min(x)), float(np.max(x))
        if hi <= lo:
            raise ParameterError("basis input has zero range")
        cuts: list = []
        if interior > 0:
            qs = np.quantile(x, np.linspace(0.0, 1.0, interior + 2)[1:-1])
            seen = set()
            for q in qs:
                q = float(q)
                if lo < q < hi and q not in seen:
                    seen.add(q)
                    cuts.append(q)
        t = [lo] * (degree + 1) + sorted(cuts) + [hi] * (degree + 1)
        return cls(knots=tuple(t), degree=degree)

    def out_of_range(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (x < self.lo) | (x > self.hi)

    def design(self, x) -> np.ndarray:
        """Dense design matrix; inputs are clipped to the training interval."""
        x = np.clip(np.asarray(x, dtype=float), self.lo, self.hi)
        t = np.asarray(self.knots, dtype=float)
        return BSpline.design_matrix(x, t, self.degree).toarray()

    def to_dict(self) -> dict:
        return {"knots": [float(t) for t in self.knots], "degree": self.degree}

    @classmethod
    def from_dict(cls, payload: dict) -> "SplineBasis":
        return cls(knots=tuple(float(t) for t in payload["knots"]),
                   degree=int(payload["degree"]))


def additive_design(bases, columns) -> np.ndarray:
    """[1 | B_1(x_1) | ... | B_q(x_q)]: one basis block per input."""
    if len(bases) != len(columns) or not bases:
        raise ParameterError("need one basis per input column")
    n = len(np.asarray(columns[0], dtype=float))
    blocks = [np.ones((n, 1))]
    for basis, col in zip(bases, columns):
        blocks.append(basis.design(col))
    return np.hstack(blocks)


def tensor_design(bases, columns) -> np.ndarray:
    """[1 | rowwise Kronecker of all basis blocks]: full interaction surface."""
    if len(bases) != len(columns) or not bases:
        raise ParameterError("need one basis per input column")
    out = bases[0].design(columns[0])
    for basis, col in zip(bases[1:], columns[1:]):
        nxt = basis.design(col)
        out = (out[:, :, None] * nxt[:, None, :]).reshape(out.shape[0], -1)
    return np.hstack([np.ones((out.shape[0], 1)), out])


def ridge_solve(design: np.ndarray, response: np.ndarray, lam: float,
                penalty_mask: np.ndarray) -> np.ndarray:
    """Solve (X'X + lam*diag(mask)) beta = X'y by Cholesky.

    The mask is 0/1 per column; the intercept column stays unpenalized.
    Spline blocks each contain the constant function, so without the
    penalty the system is rank deficient by construction.
    """
    design = np.asarray(design, dtype=float)
    response = np.asarray(response, dtype=float)
    penalty_mask = np.asarray(penalty_mask, dtype=float)
    if lam < 0:
        raise ParameterError("ridge lambda must be >= 0")
    if design.shape[0] != response.shape[0] or design.shape[1] != penalty_mask.shape[0]:
        raise ParameterError("design/response/mask shapes disagree")
    gram = design.T @ design
    gram[np.diag_indices_from(gram)] += lam * penalty_mask
    rhs = design.T @ response
    try:
        return cho_solve(cho_factor(gram), rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"penalized normal equations singular: {exc}") from exc
