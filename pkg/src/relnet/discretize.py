"""Interval discretization of continuous variables.

An ``IntervalScheme`` is a uniform border grid plus an open upper tail:
borders (first : step : last) give left-closed, right-open cells
[b0, b1), ..., [b_{n-1}, b_n) and, with ``tail``, a final [last, inf) state.
Probability mass below the first border folds into the lowest cell (the
shipped models keep that mass negligible; the fold is reported so a caller
can notice when it is not).

Representative values stand in for a cell when a solver needs a number:
the distribution's conditional median inside bounded cells, the conditional
tail mean for the open tail, and plain midpoints (tail: last + step/2) when
no distribution is attached to the node or a cell carries ~zero mass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dists import Distribution

__all__ = ["IntervalScheme", "CoverageError"]

_NEGLIGIBLE = 1e-13


class CoverageError(ValueError):
    """The scheme fails to cover the distribution it is asked to represent."""


@dataclass(frozen=True)
class IntervalScheme:
    """Uniform interval grid (first : step : last) with an optional +inf tail."""

    first: float
    step: float
    last: float
    tail: bool = True

    def __post_init__(self):
        if not self.step > 0:
            raise ValueError(f"step must be positive, got {self.step}")
        span = self.last - self.first
        n = span / self.step
        if span <= 0 or abs(n - round(n)) > 1e-9:
            raise ValueError(
                f"({self.first}:{self.step}:{self.last}) is not a whole number of steps")

    # -- geometry -------------------------------------------------------

    @property
    def borders(self) -> np.ndarray:
        n = int(round((self.last - self.first) / self.step))
        return self.first + self.step * np.arange(n + 1)

    @property
    def n_states(self) -> int:
        return len(self.borders) - 1 + (1 if self.tail else 0)

    def cells(self) -> list[tuple[float, float]]:
        b = self.borders
        out = [(float(b[i]), float(b[i + 1])) for i in range(len(b) - 1)]
        if self.tail:
            out.append((float(b[-1]), math.inf))
        return out

    def labels(self) -> tuple[str, ...]:
        def fmt(x):
            return f"{x:g}"

        out = [f"[{fmt(lo)},{fmt(hi)})" for lo, hi in self.cells()[: len(self.borders) - 1]]
        if self.tail:
            out.append(f"[{fmt(self.last)},inf)")
        return tuple(out)

    def state_index(self, value: float) -> int:
        """Cell holding ``value``; a value on a border belongs to the right
        cell; values below the grid fold into the lowest cell."""
        if math.isnan(value):
            raise ValueError("cannot place NaN on an interval grid")
        if value < self.first:
            return 0
        if value >= self.last:
            if self.tail:
                return self.n_states - 1
            raise ValueError(f"{value} is above the grid and the scheme has no tail state")
        return int((value - self.first) // self.step)

    def states_above(self, threshold: float) -> list[int]:
        """States consistent with {X > threshold} (also {X >= threshold}):
        every cell whose upper border exceeds the threshold."""
        return [i for i, (lo, hi) in enumerate(self.cells()) if hi > threshold]

    def states_below(self, threshold: float) -> list[int]:
        """States consistent with {X < threshold} (also {X <= threshold})."""
        return [i for i, (lo, hi) in enumerate(self.cells()) if lo < threshold]

    # -- probability ----------------------------------------------------

    def pmf(self, dist: Distribution, coverage_tol: float = 1e-6) -> np.ndarray:
        """Cell masses of ``dist`` on this grid; below-grid mass folds into
        the first cell.  Raises CoverageError when the grid misses more than
        ``coverage_tol`` of the distribution (no tail) — a symptom of using
        the wrong scheme for the variable."""
        b = self.borders
        cdf = np.asarray(dist.cdf(b), dtype=float)
        masses = np.diff(cdf)
        masses[0] += cdf[0]  # fold anything below the grid
        if self.tail:
            masses = np.append(masses, 1.0 - cdf[-1])
        total = float(masses.sum())
        if abs(total - 1.0) > coverage_tol:
            raise CoverageError(
                f"grid ({self.first}:{self.step}:{self.last}) covers {total:.8f} "
                f"of the {dist.family} distribution (missing {1 - total:.2e})")
        masses = np.clip(masses, 0.0, None)
        return masses / masses.sum()

    def folded_mass(self, dist: Distribution) -> float:
        return float(dist.cdf(self.first))

    def representatives(self, dist: Distribution) -> np.ndarray:
        """Per-cell representatives under ``dist``: conditional means in
        bounded cells (the fold extends the first cell's condition down to
        -inf) and in the tail; midpoint fallback wherever the cell mass is
        negligible."""
        return self.cell_moments(dist)[0]

    def cell_moments(self, dist: Distribution) -> tuple[np.ndarray, np.ndarray]:
        """Conditional mean and variance of ``dist`` within every state.

        Bounded cells integrate in probability space (Gauss-Legendre), which
        handles the folded first cell naturally; the tail uses adaptive
        quadrature.  Negligible-mass cells fall back to midpoints with zero
        variance.  Means are clamped into their cell."""
        b = self.borders
        cdf = np.asarray(dist.cdf(b), dtype=float)
        mids = self.midpoints()
        mean = np.empty(self.n_states)
        var = np.zeros(self.n_states)
        x32, w32 = np.polynomial.legendre.leggauss(32)
        x32 = 0.5 * (x32 + 1.0)
        w32 = 0.5 * w32
        n_bounded = len(b) - 1
        for i in range(n_bounded):
            p_lo = cdf[i] if i > 0 else 0.0  # folded first cell reaches down
            p_hi = cdf[i + 1]
            if p_hi - p_lo < _NEGLIGIBLE:
                mean[i] = mids[i]
                continue
            p = np.clip(p_lo + (p_hi - p_lo) * x32, 1e-300, 1.0 - 1e-16)
            x = np.asarray(dist.quantile(p), dtype=float)
            m1 = float(w32 @ x)
            mean[i] = min(max(m1, b[i]), np.nextafter(b[i + 1], b[i]))
            var[i] = max(float(w32 @ (x - m1) ** 2), 0.0)
        if self.tail:
            p_lo = cdf[-1]
            if 1.0 - p_lo < _NEGLIGIBLE:
                mean[-1] = mids[-1]
            else:
                m1, m2 = self._tail_moments(dist, p_lo)
                mean[-1] = max(m1, self.last)
                var[-1] = max(m2 - m1 * m1, 0.0)
        return mean, var

    def _tail_moments(self, dist, p_lo) -> tuple[float, float]:
        # E[X | X >= last] and E[X^2 | X >= last]; adaptive quadrature, not a hot path
        from scipy import integrate as _integrate

        x_hi = float(dist.quantile(1.0 - min((1.0 - p_lo) * 1e-10, 1e-13)))
        m1, _ = _integrate.quad(lambda x: x * dist.pdf(x), self.last, x_hi, limit=200)
        m2, _ = _integrate.quad(lambda x: x * x * dist.pdf(x), self.last, x_hi, limit=200)
        return m1 / (1.0 - p_lo), m2 / (1.0 - p_lo)

    def midpoints(self) -> np.ndarray:
        """Distribution-free representatives: cell midpoints; the open tail
        uses last + step/2."""
        b = self.borders
        mids = (b[:-1] + b[1:]) / 2.0
        if self.tail:
            mids = np.append(mids, self.last + self.step / 2.0)
        return mids

    # -- serialization --------------------------------------------------

    def to_spec(self) -> dict:
        return {"first": self.first, "step": self.step, "last": self.last, "tail": self.tail}

    @classmethod
    def from_spec(cls, spec) -> "IntervalScheme":
        return cls(float(spec["first"]), float(spec["step"]), float(spec["last"]),
                   bool(spec.get("tail", True)))
