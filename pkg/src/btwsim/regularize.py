"""Yosida-type smoothing of the sign graph and its mollified variant.

All functions are vectorized over ``r`` and return floats for scalar input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# normalized bump 35/32 (1 - s^2)^3 on [-1, 1]; C^2 at the endpoints
_BUMP = 35.0 / 32.0


@dataclass(frozen=True)
class RegParams:
    """Smoothing width ``eps``, viscosity ``delta`` and mollification width ``tau``."""

    eps: float
    delta: float = 0.0
    tau: float = 0.0

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.delta < 0 or self.tau < 0:
            raise ValueError("delta and tau must be nonnegative")


def _out(x):
    return float(x) if np.ndim(x) == 0 else x


def psi_eps(r, eps):
    """Moreau envelope of ``|r|``: quadratic inside the kink, shifted ``|r|`` outside."""
    a = np.abs(np.asarray(r, dtype=float))
    return _out(np.where(a <= eps, a * a / (2 * eps), a - eps / 2))


def phi_eps(r, eps):
    r = np.asarray(r, dtype=float)
    return _out(np.clip(r / eps, -1.0, 1.0))


def phi_eps_prime(r, eps):
    """Derivative of :func:`phi_eps`; the kink ``|r| = eps`` takes the inner value."""
    a = np.abs(np.asarray(r, dtype=float))
    return _out(np.where(a <= eps, 1.0 / eps, 0.0))


def resolvent_J(r, eps):
    """``(1 + eps sgn)^{-1} r``: soft thresholding, exactly 0 on ``|r| <= eps``."""
    r = np.asarray(r, dtype=float)
    return _out(np.sign(r) * np.maximum(np.abs(r) - eps, 0.0))


def zeta(r, p, eps):
    """``int_0^r |s|^(p-2) s phi_eps'(s) ds`` in closed form."""
    if p < 1:
        raise ValueError("p must be >= 1")
    a = np.minimum(np.abs(np.asarray(r, dtype=float)), eps)
    return _out(a**p / (p * eps))


def _bump_cdf(s):
    s = np.clip(s, -1.0, 1.0)
    return _BUMP * (s - s**3 + 0.6 * s**5 - s**7 / 7.0) + 0.5


def _bump_moment(s):
    # antiderivative of s * bump(s); constant irrelevant
    s = np.clip(s, -1.0, 1.0)
    s2 = s * s
    return _BUMP * (s2 / 2 - 0.75 * s2**2 + 0.5 * s2**3 - s2**4 / 8)


class MollifiedPhi:
    """``phi_eps`` convolved with a polynomial bump of half-width ``tau``.

    Evaluated exactly by integrating the piecewise-linear ``phi_eps``
    against the bump's polynomial CDF and first moment.
    """

    def __init__(self, eps, tau):
        if not eps > 0 or tau < 0:
            raise ValueError("need eps > 0 and tau >= 0")
        self.eps = float(eps)
        self.tau = float(tau)

    def __call__(self, r):
        if self.tau == 0:
            return phi_eps(r, self.eps)
        r = np.asarray(r, dtype=float)
        eps, tau = self.eps, self.tau
        # phi(r - x) is +1 for x < r - eps, -1 for x > r + eps, (r - x)/eps between
        lo = (r - eps) / tau
        hi = (r + eps) / tau
        p_lo = _bump_cdf(lo)
        p_hi = 1.0 - _bump_cdf(hi)
        p_mid = _bump_cdf(hi) - _bump_cdf(lo)
        m_mid = tau * (_bump_moment(hi) - _bump_moment(lo))
        return _out(p_lo - p_hi + (r * p_mid - m_mid) / eps)

    def derivative(self, r):
        if self.tau == 0:
            return phi_eps_prime(r, self.eps)
        r = np.asarray(r, dtype=float)
        mass = _bump_cdf((r + self.eps) / self.tau) - _bump_cdf((r - self.eps) / self.tau)
        return _out(mass / self.eps)


def mollify_phi(eps, tau):
    return MollifiedPhi(eps, tau)


def nonlinearity(reg):
    """``(phi, phi')`` pair used by the solvers for the given parameters."""
    m = MollifiedPhi(reg.eps, reg.tau)
    return m, m.derivative
