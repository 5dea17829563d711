"""Variation-of-parameters machinery for randomly perturbed transfer cocycles.

The perturbed n-step transfer matrix factors as T_w(n) = T_0(n) D(n); D
satisfies the backward recursion D(n-1) = (I + U_w(n)) D(n) where, for a
diagonal (Schrodinger-type) perturbation, U_w(n) = ~b(n) u(n) with a
nilpotent generator u(n) conjugated through the unperturbed cocycle.
For general off-diagonal perturbations the cocycle is first conjugated by
K(n) = diag(1, a(n)+~a(n)) to restore per-site independence, and the
one-site correction decomposes into V/U/W generator terms.

The d^{+-} amplitude pairs are built by summing Neumann layers of tail
sums (truncated at a certified site), giving perturbed solutions
psi_i = d_1 phi_1 + d_2 phi_2 with prescribed behavior at infinity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .core import Mat2, OperatorSpec, Trajectory, single_step, solve_forward
from .errors import (
    DivergentSeriesError,
    InsufficientDataError,
    InternalConsistencyError,
    InvalidArgumentError,
)
from .randpert import PerturbationModel, Realization, sample
from .subordinacy import l_norm, solve_pair

K_MAX_DEFAULT = 12
LAYER_STOP = 1e-12      # early stop when a sampled layer norm falls below this
E12 = Mat2(0.0, 1.0, 0.0, 0.0)
DIAG_PM = Mat2(1.0, 0.0, 0.0, -1.0)
DIAG_01 = Mat2(0.0, 0.0, 0.0, 1.0)


# ---------------------------------------------------------------------------
# conjugated generators and the K-conjugation
# ---------------------------------------------------------------------------

def conjugated_generators(T: Mat2) -> Tuple[Mat2, Mat2, Mat2]:
    """(U, V, W) = T^{-1} (E12, diag(1,-1), diag(0,1)) T for unimodular T."""
    if abs(T.det() - 1.0) > 1e-10 * max(1.0, T.max_abs() ** 2):
        raise InvalidArgumentError(f"T must be unimodular, det = {T.det()}")
    Ti = T.inv_unimodular()
    return (Ti @ E12 @ T, Ti @ DIAG_PM @ T, Ti @ DIAG_01 @ T)


def perturbed_spec(spec: OperatorSpec, realization: Realization) -> OperatorSpec:
    """The operator with coefficients a+~a, b+~b."""
    at = realization.a_tilde_or_zeros()
    bt = realization.b_tilde
    n_max = realization.n_max

    def a(n, _base=spec.a, _at=at, _m=n_max):
        return _base(n) + (_at[n] if 0 < n <= _m else 0.0)

    def b(n, _base=spec.b, _bt=bt, _m=n_max):
        return _base(n) + (_bt[n] if 0 < n <= _m else 0.0)

    return OperatorSpec(a=a, b=b, label=spec.label + "+pert", a_min=spec.a_min)


def k_matrix(spec: OperatorSpec, realization: Realization, n: int) -> Mat2:
    """K(n) = diag(1, a(n)+~a(n)); K(0) = I by the a(0)+~a(0) = 1 convention."""
    if n == 0:
        return Mat2.identity()
    at = realization.a_tilde_or_zeros()
    return Mat2(1.0, 0.0, 0.0, spec.a_at(n) + at[n])


def k_conjugate(spec: OperatorSpec, realization: Realization, E: float,
                n: int) -> Mat2:
    """The conjugated one-step matrix S~(n) = K(n) S_w(n) K(n-1)^{-1}.

    Unimodular and dependent only on site-n perturbation values.
    """
    at = realization.a_tilde_or_zeros()
    bt = realization.b_tilde
    alpha = spec.a_at(n) + at[n]
    if alpha <= 0.0:
        raise InvalidArgumentError(f"a+~a not positive at site {n}")
    return Mat2((E - spec.b(n) - bt[n]) / alpha, -1.0 / alpha, alpha, 0.0)


def k_transfer(spec: OperatorSpec, realization: Realization, E: float,
               n: int) -> Mat2:
    """T~(n) = S~(n) ... S~(1) = K(n) T_w(n)."""
    T = Mat2.identity()
    for m in range(1, n + 1):
        T = k_conjugate(spec, realization, E, m) @ T
    return T


# ---------------------------------------------------------------------------
# generator arrays (vectorized nilpotent conjugates along an orbit)
# ---------------------------------------------------------------------------

def nilpotent_generator_array(s1: np.ndarray, s2: np.ndarray) -> np.ndarray:
    """u(n) = T(n)^{-1} E12 T(n) from a unimodular solution pair.

    s1, s2 are value arrays (site-indexed from 0) of the two solutions
    whose columns form T(n); entry n of the result is
    [[s2 s1, s2^2], [-s1^2, -s1 s2]](n). Nilpotent with zero trace.
    """
    u = np.empty((len(s1), 2, 2))
    u[:, 0, 0] = s2 * s1
    u[:, 0, 1] = s2 * s2
    u[:, 1, 0] = -s1 * s1
    u[:, 1, 1] = -s2 * s1
    return u


def diagonal_generator_array(spec: OperatorSpec, E: float,
                             n_max: int) -> np.ndarray:
    """Generator array for diagonal perturbations of a Schrodinger operator.

    Uses the canonical unimodular solution pair with (f(0), f(1)) = (0, 1)
    and (1, 0); requires a == 1 so the unperturbed cocycle is unimodular.
    """
    for n in (1, 2, max(3, n_max // 2), n_max):
        if abs(spec.a_at(n) - 1.0) > 1e-12:
            raise InvalidArgumentError(
                "diagonal mode requires off-diagonal coefficients == 1"
            )
    alpha = solve_forward(spec, E, 0.0, 1.0, n_max)
    gamma = solve_forward(spec, E, 1.0, 0.0, n_max)
    return nilpotent_generator_array(alpha.values, gamma.values)


def subordinate_generator_array(phi1: Trajectory, phi2: Trajectory) -> np.ndarray:
    """Generator array in the basis of a boundary-condition solution pair."""
    return nilpotent_generator_array(phi1.values, phi2.values)


# ---------------------------------------------------------------------------
# correction recursion (dual-path, per-realization)
# ---------------------------------------------------------------------------

@dataclass
class CorrectionState:
    """D(n) with its mode tag; log_scale mirrors a log-scaled T_0 if used."""

    D: Mat2
    n: int
    mode: str
    log_scale: float = 0.0


def _transfer_sequence(spec: OperatorSpec, E: float, n_max: int) -> List[Mat2]:
    out = [Mat2.identity()]
    a_prev = 1.0
    for n in range(1, n_max + 1):
        a_n = spec.a_at(n)
        out.append(single_step(E, spec.b(n), a_n, a_prev) @ out[-1])
        a_prev = a_n
    return out


def correction_recursion(spec: OperatorSpec, realization: Realization, E: float,
                         n_max: int, mode: str = "schrodinger-diagonal",
                         tol: float = 1e-10) -> List[CorrectionState]:
    """D(n) for n = 0..n_max, computed two independent ways.

    Path (i) is definitional: D(n) = T_0(n)^{-1} T_w(n) (conjugated
    variants in general mode). Path (ii) applies the one-site recursion
    factors. Disagreement beyond ``tol`` (relative, scaled by the factor
    conditioning) raises with the offending site.
    """
    if mode not in ("schrodinger-diagonal", "general-jacobi-conjugated"):
        raise InvalidArgumentError(f"unknown mode {mode}")
    if n_max > realization.n_max:
        raise InsufficientDataError("realization shorter than n_max")
    pspec = perturbed_spec(spec, realization)
    bt = realization.b_tilde
    at = realization.a_tilde_or_zeros()

    if mode == "schrodinger-diagonal":
        if np.any(at[1:n_max + 1] != 0.0):
            raise InvalidArgumentError("diagonal mode forbids ~a perturbations")
        u_arr = diagonal_generator_array(spec, E, n_max)
        T0 = _transfer_sequence(spec, E, n_max)
        Tw = _transfer_sequence(pspec, E, n_max)
        states = [CorrectionState(Mat2.identity(), 0, mode)]
        D = Mat2.identity()
        for n in range(1, n_max + 1):
            u = Mat2.from_array(u_arr[n])
            # (I + ~b u)^{-1} = I - ~b u exactly (u is nilpotent)
            D = D.sub(u.scaled(bt[n]) @ D)
            D_def = T0[n].inv_unimodular() @ Tw[n]
            scale = max(1.0, D.max_abs()) * max(1.0, T0[n].max_abs() ** 2)
            if (D.sub(D_def)).max_abs() > tol * scale:
                raise InternalConsistencyError(
                    f"correction paths disagree at site {n}", site=n)
            states.append(CorrectionState(D, n, mode))
        return states

    # general-jacobi-conjugated
    Tt0 = [Mat2.identity()]
    Ttw = [Mat2.identity()]
    a_prev = 1.0
    zero_real = Realization(seed=-1, n_max=n_max,
                            b_tilde=np.zeros(n_max + 1))
    states = [CorrectionState(Mat2.identity(), 0, mode)]
    D = Mat2.identity()
    for n in range(1, n_max + 1):
        Tt0.append(k_conjugate(spec, zero_real, E, n) @ Tt0[-1])
        Ttw.append(k_conjugate(spec, realization, E, n) @ Ttw[-1])
        a_n = spec.a_at(n)
        U, V, W = conjugated_generators(Tt0[n])
        c_u = bt[n] / (a_n * (a_n + at[n]))
        c_v = at[n] / a_n
        c_w = at[n] ** 2 / (a_n * (a_n + at[n]))
        Ut = Mat2.from_array(
            c_v * V.to_array() + c_u * U.to_array() + c_w * W.to_array())
        factor = Mat2(1.0 + Ut.m11, Ut.m12, Ut.m21, 1.0 + Ut.m22)
        D = factor.inv_unimodular() @ D
        D_def = Tt0[n].inv_unimodular() @ Ttw[n]
        scale = max(1.0, D.max_abs()) * max(1.0, Tt0[n].max_abs() ** 2)
        if (D.sub(D_def)).max_abs() > tol * scale:
            raise InternalConsistencyError(
                f"correction paths disagree at site {n}", site=n)
        states.append(CorrectionState(D, n, mode))
    return states


def correction_ensemble(spec: OperatorSpec, model: PerturbationModel, E: float,
                        seeds: Sequence[int], checkpoints: Sequence[int],
                        chunk: int = 50) -> np.ndarray:
    """D snapshots, shape (len(seeds), len(checkpoints), 2, 2).

    Vectorized over realizations; diagonal (Schrodinger) mode only, using
    the exact nilpotent-inverse forward factors.
    """
    checkpoints = sorted(checkpoints)
    n_max = checkpoints[-1]
    u_arr = diagonal_generator_array(spec, E, n_max)
    out = np.empty((len(seeds), len(checkpoints), 2, 2))
    for lo in range(0, len(seeds), chunk):
        batch = seeds[lo:lo + chunk]
        bt = np.stack([sample(model, s, n_max).b_tilde for s in batch])
        D = np.broadcast_to(np.eye(2), (len(batch), 2, 2)).copy()
        ci = 0
        # count how many checkpoints already filled for this batch
        for n in range(1, n_max + 1):
            uD = np.matmul(u_arr[n], D)
            D = D - bt[:, n, None, None] * uD
            while ci < len(checkpoints) and checkpoints[ci] == n:
                out[lo:lo + len(batch), ci] = D
                ci += 1
    return out


# ---------------------------------------------------------------------------
# Neumann layers and amplitude pairs
# ---------------------------------------------------------------------------

@dataclass
class AmplitudePair:
    d1: float
    d2: float
    n: int
    branch: str
    f_plus_weight: float = 1.0

    @property
    def weighted_d2(self) -> float:
        return self.d2 * self.f_plus_weight


def decay_condition_check(var_b2: np.ndarray, u_arr: np.ndarray,
                          f_plus: np.ndarray) -> List[float]:
    """Decade sums of <~b^2> (u11^2 + u12^2 + u22^2 + u21^2 f+^2).

    Raises naming the divergent decade if the last ratio exceeds 0.95.
    """
    n_max = len(var_b2) - 1
    terms = var_b2 * (u_arr[:, 0, 0] ** 2 + u_arr[:, 0, 1] ** 2
                      + u_arr[:, 1, 1] ** 2
                      + u_arr[:, 1, 0] ** 2 * f_plus ** 2)
    sums = []
    lo, hi = 1, 10
    while lo <= n_max:
        sums.append(float(terms[lo:min(hi, n_max) + 1].sum()))
        lo, hi = hi + 1, hi * 10
    if len(sums) >= 2 and sums[-2] > 0 and sums[-1] > 0.95 * sums[-2]:
        raise DivergentSeriesError(
            f"decay condition fails: decade {len(sums)} sum {sums[-1]:.3e} "
            f"vs previous {sums[-2]:.3e}"
        )
    return sums


def n_quarter_site(var_b2: np.ndarray, u_arr: np.ndarray) -> int:
    """Smallest N with sum_{j>N} <~b^2> ||u(j)||_HS^2 <= 1/4.

    Uses the exact closed-form per-site variances; the operator norm of a
    2x2 matrix is bounded by its Hilbert-Schmidt norm, so the contraction
    constant is 1.
    """
    hs2 = np.einsum("nij,nij->n", u_arr, u_arr)
    tail = np.concatenate([np.cumsum((var_b2 * hs2)[::-1])[::-1], [0.0]])
    # tail[n] = sum over j >= n; want sum over j > N i.e. tail[N+1]
    ok = np.nonzero(tail[1:] <= 0.25)[0]
    if len(ok) == 0:
        raise DivergentSeriesError("no contraction site within the horizon")
    return int(ok[0])


def neumann_layers(b_tilde: np.ndarray, u_arr: np.ndarray, n_start: int,
                   K_max: int = K_MAX_DEFAULT,
                   branch: str = "plus") -> Tuple[np.ndarray, List[float]]:
    """Sum of Neumann layers d(n) for n = n_start..n_max, one realization.

    Returns (d_total indexed by absolute site with entries below n_start
    zeroed, layer sup-norms over the range). Layer 0 is the constant
    terminal vector; layer k+1 is the truncated tail sum of ~b u d^k.
    """
    n_max = len(b_tilde) - 1
    d0 = np.array([0.0, 1.0]) if branch == "plus" else np.array([1.0, 0.0])
    total = np.zeros((n_max + 1, 2))
    total[n_start:] = d0
    layer = np.broadcast_to(d0, (n_max + 1, 2)).copy()
    layer[:n_start] = 0.0
    sups = [float(np.linalg.norm(d0))]
    for k in range(1, K_max + 1):
        w = b_tilde[:, None] * np.einsum("nij,nj->ni", u_arr, layer)
        w[:n_start] = 0.0
        # suffix sums: next[n] = sum_{j > n} w[j]
        suffix = np.zeros((n_max + 2, 2))
        suffix[:-1] = np.cumsum(w[::-1], axis=0)[::-1]
        nxt = suffix[1:]
        layer = nxt.copy()
        layer[:n_start] = 0.0
        total[n_start:] += layer[n_start:]
        sup = float(np.max(np.abs(layer))) if n_max >= n_start else 0.0
        sups.append(sup)
        if sup < LAYER_STOP:
            break
    return total, sups


@dataclass
class NeumannReport:
    branch: str
    n_quarter: int
    probe_site: int
    layer_moments: np.ndarray        # sampled E||d^k(probe)||^2 per layer
    layer_moment_se: np.ndarray
    checkpoints: np.ndarray
    d_median: np.ndarray             # (len(checkpoints), 2) medians over seeds
    tail_variance: float             # truncation certificate at n_max
    contraction_ok: bool


def neumann_series(model: PerturbationModel, u_arr: np.ndarray,
                   f_plus: Callable[[int], float], n_start: int,
                   K_max: int = K_MAX_DEFAULT, branch: str = "plus",
                   seeds: Sequence[int] = range(100),
                   checkpoints: Optional[Sequence[int]] = None) -> NeumannReport:
    """Ensemble Neumann construction with contraction diagnostics."""
    n_max = len(u_arr) - 1
    var_b2 = model.b_dist.moments_array(2, n_max)
    fp = np.array([f_plus(max(n, 1)) for n in range(n_max + 1)])
    if np.any(np.diff(fp[1:]) < -1e-12) or np.any(fp[1:] <= 0.0):
        raise InvalidArgumentError("f_plus must be positive nondecreasing")
    decay_condition_check(var_b2, u_arr, fp)
    nq = n_quarter_site(var_b2, u_arr)
    probe = max(n_start, nq)
    if checkpoints is None:
        checkpoints = np.unique(np.geomspace(
            max(probe, 10), n_max, 8).astype(int))
    checkpoints = np.asarray(checkpoints)

    layer_sq = np.full((len(seeds), K_max + 1), np.nan)
    d_vals = np.empty((len(seeds), len(checkpoints), 2))
    for i, s in enumerate(seeds):
        real = sample(model, s, n_max)
        d0 = np.array([0.0, 1.0]) if branch == "plus" else np.array([1.0, 0.0])
        layer = np.broadcast_to(d0, (n_max + 1, 2)).copy()
        layer[:probe] = 0.0
        total = layer.copy()
        layer_sq[i, 0] = float(layer[probe] @ layer[probe])
        for k in range(1, K_max + 1):
            w = real.b_tilde[:, None] * np.einsum("nij,nj->ni", u_arr, layer)
            w[:probe] = 0.0
            suffix = np.zeros((n_max + 2, 2))
            suffix[:-1] = np.cumsum(w[::-1], axis=0)[::-1]
            layer = suffix[1:].copy()
            layer[:probe] = 0.0
            total += layer
            layer_sq[i, k] = float(layer[probe] @ layer[probe])
            if math.sqrt(layer_sq[i, k]) < LAYER_STOP:
                break
        d_vals[i] = total[checkpoints]

    counts = np.sum(~np.isnan(layer_sq), axis=0)
    moments = np.full(K_max + 1, np.nan)
    se = np.zeros(K_max + 1)
    valid = counts > 0
    moments[valid] = np.nanmean(layer_sq[:, valid], axis=0)
    se[valid] = (np.nanstd(layer_sq[:, valid], axis=0)
                 / np.sqrt(counts[valid]))
    # contraction verdict: each sampled layer moment <= (1/4)^k + 3 se
    ok = True
    for k in range(1, len(moments)):
        if counts[k] == 0:
            break
        if moments[k] > 0.25 ** k + 3.0 * se[k]:
            ok = False
    hs2 = np.einsum("nij,nij->n", u_arr, u_arr)
    tail_var = float((var_b2 * hs2)[checkpoints[-1]:].sum())
    return NeumannReport(
        branch=branch, n_quarter=nq, probe_site=probe,
        layer_moments=moments, layer_moment_se=se,
        checkpoints=checkpoints, d_median=np.median(d_vals, axis=0),
        tail_variance=tail_var, contraction_ok=ok,
    )


# ---------------------------------------------------------------------------
# perturbed solutions
# ---------------------------------------------------------------------------

def perturbed_solutions(spec: OperatorSpec, realization: Realization, E: float,
                        theta_star: float, n_max: Optional[int] = None,
                        K_max: int = K_MAX_DEFAULT,
                        L_grid: Optional[np.ndarray] = None,
                        residual_tol: float = 1e-9):
    """(psi1, psi2, ratios) built from the Neumann amplitude pairs.

    psi1 = d-_1 phi1 + d-_2 phi2, psi2 = d+_1 phi1 + d+_2 phi2, with the
    phi pair at the given boundary angle. Verifies the perturbed
    difference-equation residual at every interior site and reports the
    L-norm ratio traces ||psi_i||_L / ||phi_i||_L when a grid is given.
    """
    if n_max is None:
        n_max = realization.n_max
    phi1, phi2 = solve_pair(spec, E, theta_star, n_max)
    u_arr = subordinate_generator_array(phi1, phi2)
    d_minus, _ = neumann_layers(realization.b_tilde[:n_max + 1], u_arr, 0,
                                K_max, branch="minus")
    d_plus, _ = neumann_layers(realization.b_tilde[:n_max + 1], u_arr, 0,
                               K_max, branch="plus")
    psi1_vals = d_minus[:, 0] * phi1.values + d_minus[:, 1] * phi2.values
    psi2_vals = d_plus[:, 0] * phi1.values + d_plus[:, 1] * phi2.values
    pspec = perturbed_spec(spec, realization)
    psi1 = Trajectory(values=psi1_vals, E=E, spec_label=pspec.label,
                      theta=theta_star)
    psi2 = Trajectory(values=psi2_vals, E=E, spec_label=pspec.label,
                      theta=theta_star)
    for psi in (psi1, psi2):
        scale = float(np.max(np.abs(psi.values))) or 1.0
        for n in range(1, n_max):
            res = psi.residual(pspec, n)
            if abs(res) > residual_tol * scale:
                raise InternalConsistencyError(
                    f"perturbed residual {res} at site {n}", site=n)
    ratios = None
    if L_grid is not None:
        ratios = {"L": np.asarray(L_grid, dtype=float),
                  "psi1": np.empty(len(L_grid)),
                  "psi2": np.empty(len(L_grid))}
        for i, L in enumerate(L_grid):
            ratios["psi1"][i] = l_norm(psi1, L) / l_norm(phi1, L)
            ratios["psi2"][i] = l_norm(psi2, L) / l_norm(phi2, L)
    return psi1, psi2, ratios
