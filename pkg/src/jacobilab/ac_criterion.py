"""Cesaro-average transfer-norm test and moment-weighted membership sums.

The absolutely-continuous-support diagnostic is the liminf of
(1/N) sum_{n<=N} t^E(n)^2 over a geometric N-grid, with t^E(n) the
spectral norm of the n-step transfer matrix. Membership in the
admissible-perturbation set is a convergence verdict for

    sum_n (<~a(n)^4>^{1/2} + <~b(n)^2>) * ((a(n)+1) * t^E(n))^4

by a decade-ratio test. Everything runs in the log domain so
exponentially growing orbits never overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple

import numpy as np

from .core import OperatorSpec
from .errors import InvalidArgumentError, UnsupportedModelError
from .randpert import PerturbationModel

TAU_BOUND = 1e3          # boundedness proxy: max_n t^E(n) <= tau_bound
DECADE_RATIO = 0.9       # convergence verdict threshold on decade sums
LOG_SAT = 700.0          # beyond this, exp() overflows a double


def default_n_grid(j_max: int = 40) -> List[int]:
    """N_j = ceil(2^(j/2)), j = 2..j_max, deduplicated."""
    grid = sorted({math.ceil(2.0 ** (j / 2.0)) for j in range(2, j_max + 1)})
    return grid


def _logaddexp(x: float, y: float) -> float:
    if x == -math.inf:
        return y
    if y == -math.inf:
        return x
    hi, lo = (x, y) if x >= y else (y, x)
    return hi + math.log1p(math.exp(lo - hi))


def log_t2_stream(spec: OperatorSpec, E: float, n_max: int) -> Iterator[float]:
    """Yields ln t^E(n)^2 for n = 1..n_max in one forward pass.

    Plain-float 2x2 propagation with rescaling; the spectral norm comes
    from the entry-square sum g and det T(n) = 1/a(n) via
    ||T||^2 = (g + sqrt(g^2 - 4 det^2)) / 2.
    """
    m11, m12, m21, m22 = 1.0, 0.0, 0.0, 1.0
    log_scale = 0.0
    a_prev = 1.0
    for n in range(1, n_max + 1):
        a_n = spec.a_at(n)
        b_n = spec.b(n)
        s11 = (E - b_n) / a_n
        s12 = -a_prev / a_n
        r11 = s11 * m11 + s12 * m21
        r12 = s11 * m12 + s12 * m22
        m11, m12, m21, m22 = r11, r12, m11, m12
        big = max(abs(m11), abs(m12), abs(m21), abs(m22))
        if big > 1e60:  # keep g^2 representable in the norm formula
            m11 /= big; m12 /= big; m21 /= big; m22 /= big
            log_scale += math.log(big)
        g = m11 * m11 + m12 * m12 + m21 * m21 + m22 * m22
        # rescaled det: det T(n) = 1/a(n), divided by the squared scale
        det = math.exp(-2.0 * min(log_scale, 300.0)) / a_n
        disc = g * g - 4.0 * det * det
        t2 = 0.5 * (g + math.sqrt(disc if disc > 0.0 else 0.0))
        yield math.log(t2) + 2.0 * log_scale
        a_prev = a_n


@dataclass
class CesaroReport:
    """One-energy record of running Cesaro averages of t^E(n)^2."""

    E: float
    N_grid: List[int]
    averages: List[float]
    liminf_proxy: float
    bounded_flag: bool
    log_averages: List[float] = field(default_factory=list)
    saturated: bool = False
    max_log_t: float = 0.0


def cesaro_scan(spec: OperatorSpec, E: float,
                N_grid: Optional[List[int]] = None) -> CesaroReport:
    """Running averages (1/N) sum_{n<=N} t^E(n)^2 at the grid points."""
    if N_grid is None:
        N_grid = default_n_grid()
    if any(b <= a for a, b in zip(N_grid, N_grid[1:])):
        raise InvalidArgumentError("N_grid must be strictly increasing")
    n_max = N_grid[-1]
    if not spec.growth_check(n_max):
        raise InvalidArgumentError("spec fails the finite-truncation growth check")

    log_sum = -math.inf
    max_log_t = -math.inf
    log_avgs = []
    gi = 0
    for n, lt2 in enumerate(log_t2_stream(spec, E, n_max), start=1):
        log_sum = _logaddexp(log_sum, lt2)
        if 0.5 * lt2 > max_log_t:
            max_log_t = 0.5 * lt2
        if gi < len(N_grid) and n == N_grid[gi]:
            log_avgs.append(log_sum - math.log(n))
            gi += 1

    saturated = max(log_avgs) > LOG_SAT
    averages = [math.exp(v) if v <= LOG_SAT else math.inf for v in log_avgs]
    last_decade = [a for N, a in zip(N_grid, averages) if N >= N_grid[-1] / 10.0]
    liminf_proxy = min(last_decade)
    bounded = max_log_t <= math.log(TAU_BOUND)
    return CesaroReport(
        E=E, N_grid=list(N_grid), averages=averages,
        liminf_proxy=liminf_proxy, bounded_flag=bounded,
        log_averages=log_avgs, saturated=saturated, max_log_t=max_log_t,
    )


def _decade_log_sums(log_terms_by_site: Iterator[Tuple[int, float]],
                     n_max: int) -> List[float]:
    """Log of per-decade sums: sites (10^{k-1}, 10^k] up to n_max."""
    edges = []
    e = 10
    while e < n_max:
        edges.append(e)
        e *= 10
    edges.append(n_max)
    sums = [-math.inf] * len(edges)
    di = 0
    for n, lt in log_terms_by_site:
        while n > edges[di]:
            di += 1
        sums[di] = _logaddexp(sums[di], lt)
    return sums


def gamma_membership(spec: OperatorSpec, model: PerturbationModel, E: float,
                     N_max: int = 10 ** 5) -> Tuple[bool, float]:
    """Decade-ratio convergence verdict and the partial sum up to N_max.

    Requires closed-form per-site moments <~a^4> and <~b^2> from the model.
    """
    if N_max < 100:
        raise InvalidArgumentError("N_max too small for a decade verdict")
    b2 = model.b_dist.moments_array(2, N_max)
    if model.a_dist is not None and model.a_dist.kind != "zero":
        a4 = model.a_dist.moments_array(4, N_max)
        coeff = np.sqrt(a4) + b2
    else:
        coeff = b2
    if not np.all(np.isfinite(coeff)):
        raise UnsupportedModelError("per-site moments not available in closed form")

    def terms():
        for n, lt2 in enumerate(log_t2_stream(spec, E, N_max), start=1):
            c = coeff[n]
            if c <= 0.0:
                continue
            la = math.log(spec.a_at(n) + 1.0)
            yield n, math.log(c) + 4.0 * la + 2.0 * lt2

    decades = _decade_log_sums(terms(), N_max)
    total = -math.inf
    for d in decades:
        total = _logaddexp(total, d)
    partial_sum = math.exp(total) if total <= LOG_SAT else math.inf

    # verdict: the last three decade ratios must each be <= DECADE_RATIO
    if all(d == -math.inf for d in decades):
        return True, 0.0
    ratios = [0.0 if b == -math.inf
              else (math.inf if a == -math.inf or b - a > LOG_SAT
                    else math.exp(b - a))
              for a, b in zip(decades[:-1], decades[1:])]
    member = len(ratios) >= 3 and all(r <= DECADE_RATIO for r in ratios[-3:])
    return member, partial_sum
