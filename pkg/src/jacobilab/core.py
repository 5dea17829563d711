"""Jacobi difference-equation and transfer-matrix kernel.

Real 2x2 matrices, one-step and n-step transfer products for a Jacobi
operator with off-diagonal a(n) > 0 and diagonal b(n), forward solution of
the three-term recursion, and an O(log m) power for constant unimodular
blocks (used for propagation across long potential-free stretches).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import mpmath
import numpy as np

from .errors import InvalidArgumentError, OverflowSiteError

# Entries beyond this are treated as overflow in unscaled products.
ENTRY_LIMIT = 1e150

DEFAULT_A_MIN = 1e-6


@dataclass(frozen=True)
class Mat2:
    """Real 2x2 matrix with the handful of operations the cocycle needs."""

    m11: float
    m12: float
    m21: float
    m22: float

    @staticmethod
    def identity() -> "Mat2":
        return Mat2(1.0, 0.0, 0.0, 1.0)

    def __matmul__(self, other: "Mat2") -> "Mat2":
        return Mat2(
            self.m11 * other.m11 + self.m12 * other.m21,
            self.m11 * other.m12 + self.m12 * other.m22,
            self.m21 * other.m11 + self.m22 * other.m21,
            self.m21 * other.m12 + self.m22 * other.m22,
        )

    def apply(self, v1: float, v2: float) -> tuple[float, float]:
        return (self.m11 * v1 + self.m12 * v2, self.m21 * v1 + self.m22 * v2)

    def det(self) -> float:
        return self.m11 * self.m22 - self.m12 * self.m21

    def trace(self) -> float:
        return self.m11 + self.m22

    def inv(self) -> "Mat2":
        d = self.det()
        if d == 0.0:
            raise InvalidArgumentError("singular 2x2 matrix")
        return Mat2(self.m22 / d, -self.m12 / d, -self.m21 / d, self.m11 / d)

    def inv_unimodular(self) -> "Mat2":
        """Inverse assuming det = 1 (exact adjugate, no division)."""
        return Mat2(self.m22, -self.m12, -self.m21, self.m11)

    def hs_norm(self) -> float:
        return math.sqrt(
            self.m11 ** 2 + self.m12 ** 2 + self.m21 ** 2 + self.m22 ** 2
        )

    def norm(self) -> float:
        """Spectral norm from the explicit 2x2 singular-value formula."""
        m = self.max_abs()
        if m == 0.0:
            return 0.0
        if m > 1e60:  # keep g^2 representable
            return m * self.scaled(1.0 / m).norm()
        if m < 1e-60:  # avoid underflow of the entry squares
            return self.scaled(1e60).norm() / 1e60
        g = self.m11 ** 2 + self.m12 ** 2 + self.m21 ** 2 + self.m22 ** 2
        d = self.det()
        disc = g * g - 4.0 * d * d
        if disc < 0.0:  # rounding
            disc = 0.0
        return math.sqrt(0.5 * (g + math.sqrt(disc)))

    def max_abs(self) -> float:
        return max(abs(self.m11), abs(self.m12), abs(self.m21), abs(self.m22))

    def scaled(self, c: float) -> "Mat2":
        return Mat2(c * self.m11, c * self.m12, c * self.m21, c * self.m22)

    def sub(self, other: "Mat2") -> "Mat2":
        return Mat2(
            self.m11 - other.m11,
            self.m12 - other.m12,
            self.m21 - other.m21,
            self.m22 - other.m22,
        )

    def isfinite(self) -> bool:
        return all(
            math.isfinite(x) for x in (self.m11, self.m12, self.m21, self.m22)
        )

    def to_array(self) -> np.ndarray:
        return np.array(
            [[self.m11, self.m12], [self.m21, self.m22]], dtype=float
        )

    @staticmethod
    def from_array(a) -> "Mat2":
        return Mat2(float(a[0][0]), float(a[0][1]), float(a[1][0]), float(a[1][1]))


@dataclass(frozen=True)
class ScaledMat2:
    """A 2x2 matrix together with a scalar log-scale: M_true = e^scale * mat."""

    mat: Mat2
    log_scale: float

    def log_norm(self) -> float:
        return math.log(self.mat.norm()) + self.log_scale

    def to_mat2(self) -> Mat2:
        c = math.exp(self.log_scale)
        return self.mat.scaled(c)


@dataclass
class OperatorSpec:
    """Generator of the sequences a(n) > 0, b(n) defining the operator.

    a is consulted for n >= 1 only; a(0) is fixed to 1.
    """

    a: Callable[[int], float]
    b: Callable[[int], float]
    label: str = ""
    a_min: float = DEFAULT_A_MIN

    def a_at(self, n: int) -> float:
        if n == 0:
            return 1.0
        an = self.a(n)
        if an < self.a_min:
            raise InvalidArgumentError(
                f"a({n}) = {an} below declared floor a_min = {self.a_min}"
            )
        return an

    def growth_average(self, L: int) -> float:
        """(1/L) * sum_{n<=L} 1/a(n): finite-truncation growth proxy."""
        return sum(1.0 / self.a_at(n) for n in range(1, L + 1)) / L

    def growth_check(self, L: int, gamma_growth: float = 1e-3) -> bool:
        return self.growth_average(L) >= gamma_growth


def free_laplacian(label: str = "free") -> OperatorSpec:
    return OperatorSpec(a=lambda n: 1.0, b=lambda n: 0.0, label=label)


def constant_spec(a_const: float = 1.0, b_const: float = 0.0,
                  label: str = "constant") -> OperatorSpec:
    return OperatorSpec(a=lambda n: a_const, b=lambda n: b_const, label=label)


def schrodinger_spec(b: Callable[[int], float], label: str = "schrodinger") -> OperatorSpec:
    return OperatorSpec(a=lambda n: 1.0, b=b, label=label)


@dataclass
class Trajectory:
    """A solution phi(n) of the difference equation with running square sums.

    values[k] = phi(k) for sites 0..n_max; cumulative_sq[k] = sum of
    phi(n)^2 over 1 <= n <= k (the L-norm convention sums from n = 1).
    """

    values: np.ndarray
    E: float
    spec_label: str = ""
    theta: Optional[float] = None
    cumulative_sq: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.cumulative_sq is None:
            cs = np.zeros_like(self.values)
            cs[1:] = np.cumsum(self.values[1:] ** 2)
            self.cumulative_sq = cs

    @property
    def n_max(self) -> int:
        return len(self.values) - 1

    def residual(self, spec: OperatorSpec, n: int) -> float:
        """Three-term recursion residual at site n (1 <= n <= n_max-1)."""
        v = self.values
        return (
            spec.a_at(n) * v[n + 1]
            + spec.a_at(n - 1) * v[n - 1]
            + (spec.b(n) - self.E) * v[n]
        )


def single_step(E: float, b_n: float, a_n: float, a_prev: float) -> Mat2:
    """One-step transfer matrix [[(E-b)/a_n, -a_prev/a_n], [1, 0]]."""
    if a_n <= 0.0 or a_prev <= 0.0:
        raise InvalidArgumentError("off-diagonal entries must be positive")
    return Mat2((E - b_n) / a_n, -a_prev / a_n, 1.0, 0.0)


def transfer_product(spec: OperatorSpec, E: float, n: int,
                     return_norms: bool = False):
    """Product S(n) ... S(1) of single-step matrices.

    With return_norms, also returns the list [t(1), ..., t(n)] of spectral
    norms of the partial products. Raises OverflowSiteError when entries
    leave the representable range; use transfer_product_scaled for
    exponentially growing orbits.
    """
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    T = Mat2.identity()
    norms = [] if return_norms else None
    for k in range(1, n + 1):
        T = single_step(E, spec.b(k), spec.a_at(k), spec.a_at(k - 1)) @ T
        if T.max_abs() > ENTRY_LIMIT or not T.isfinite():
            raise OverflowSiteError(k)
        if return_norms:
            norms.append(T.norm())
    if return_norms:
        return T, norms
    return T


def transfer_product_scaled(spec: OperatorSpec, E: float, n: int) -> ScaledMat2:
    """Log-scaled n-step product; norms up to e^1e6 stay representable."""
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    T = Mat2.identity()
    log_scale = 0.0
    for k in range(1, n + 1):
        T = single_step(E, spec.b(k), spec.a_at(k), spec.a_at(k - 1)) @ T
        m = T.max_abs()
        if m > 1e120:
            T = T.scaled(1.0 / m)
            log_scale += math.log(m)
        elif 0.0 < m < 1e-120:
            T = T.scaled(1.0 / m)
            log_scale += math.log(m)
    return ScaledMat2(T, log_scale)


def _cheb_u_pair(t: float, m: int) -> tuple[float, float]:
    """(U_{m-1}(t/2), U_{m-2}(t/2)) for the Cayley-Hamilton power formula.

    Elliptic traces go through the angle form; the phase m*theta is reduced
    with extended precision once m is large enough for double precision to
    lose it.
    """
    x = 0.5 * t
    if abs(abs(x) - 1.0) <= 1e-12:
        # parabolic: U_{k}(+-1) = (+-1)^k (k+1)
        s = 1.0 if x > 0 else -1.0
        p = (s ** (m - 1)) * m
        q = (s ** m) * (m - 1)
        return float(p), float(q)
    if abs(x) < 1.0:
        if m <= 10 ** 6:
            th = math.acos(x)
            s = math.sin(th)
            return math.sin(m * th) / s, math.sin((m - 1) * th) / s
        with mpmath.workprec(int(m).bit_length() + 96):
            th = mpmath.acos(mpmath.mpf(x))
            s = mpmath.sin(th)
            p = mpmath.sin(m * th) / s
            q = mpmath.sin((m - 1) * th) / s
            return float(p), float(q)
    # hyperbolic
    lam = abs(x) + math.sqrt(x * x - 1.0)
    if m * math.log(lam) > 340.0:
        raise OverflowSiteError(m, "hyperbolic block power overflows")
    sgn = 1.0 if x > 0 else -1.0
    denom = lam - 1.0 / lam
    p = (lam ** m - lam ** (-m)) / denom
    q = (lam ** (m - 1) - lam ** (1 - m)) / denom
    return (sgn ** (m - 1)) * p, (sgn ** m) * q


def fast_const_power(S: Mat2, m: int) -> Mat2:
    """S^m for a det-1 matrix, in O(log m) or via the closed Chebyshev form.

    Cayley-Hamilton gives S^m = U_{m-1}(tr S / 2) S - U_{m-2}(tr S / 2) I
    for any unimodular S, which covers block exponents up to 2^127.
    """
    if m < 0:
        raise InvalidArgumentError("exponent must be nonnegative")
    if abs(S.det() - 1.0) > 1e-12:
        raise InvalidArgumentError(
            f"fast_const_power needs det = 1, got {S.det()}"
        )
    if m == 0:
        return Mat2.identity()
    if m == 1:
        return S
    p, q = _cheb_u_pair(S.trace(), m)
    return Mat2(
        p * S.m11 - q, p * S.m12,
        p * S.m21, p * S.m22 - q,
    )


def naive_power(S: Mat2, m: int) -> Mat2:
    """Repeated multiplication; the oracle fast_const_power is tested against."""
    T = Mat2.identity()
    for _ in range(m):
        T = S @ T
    return T


def solve_forward(spec: OperatorSpec, E: float, phi0: float, phi1: float,
                  n_max: int, theta: Optional[float] = None) -> Trajectory:
    """Solve a(n)phi(n+1) + a(n-1)phi(n-1) + b(n)phi(n) = E phi(n) forward."""
    if phi0 == 0.0 and phi1 == 0.0:
        raise InvalidArgumentError("initial data must be nonzero")
    values = np.empty(n_max + 1, dtype=float)
    values[0] = phi0
    if n_max >= 1:
        values[1] = phi1
    prev, cur = phi0, phi1
    a_prev = 1.0  # a(0)
    for n in range(1, n_max):
        a_n = spec.a_at(n)
        nxt = ((E - spec.b(n)) * cur - a_prev * prev) / a_n
        if not math.isfinite(nxt) or abs(nxt) > ENTRY_LIMIT:
            raise OverflowSiteError(n + 1)
        values[n + 1] = nxt
        prev, cur = cur, nxt
        a_prev = a_n
    return Trajectory(values=values, E=E, spec_label=spec.label, theta=theta)


def ordered_mat_product(mats: np.ndarray) -> np.ndarray:
    """Ordered product mats[-1] @ ... @ mats[0] by pairwise tree reduction.

    mats has shape (..., k, 2, 2); the reduction runs along axis -3 and is
    deterministic (independent of chunking by construction).
    """
    mats = np.asarray(mats, dtype=float)
    while mats.shape[-3] > 1:
        k = mats.shape[-3]
        even = mats[..., 0:k - 1:2, :, :]
        odd = mats[..., 1:k:2, :, :]
        paired = np.matmul(odd, even)
        if k % 2 == 1:
            paired = np.concatenate(
                [paired, mats[..., k - 1:k, :, :]], axis=-3
            )
        mats = paired
    return mats[..., 0, :, :]
