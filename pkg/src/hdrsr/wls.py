"""Edge-preserving smoothing by weighted least squares.

Minimizes sum_p (u_p - g_p)^2 + lam * sum_p (ax_p (du/dx)_p^2 + ay_p (du/dy)_p^2)
on the 4-neighbor pixel grid, with smoothness weights derived from the log of
a guidance plane so that smoothing stalls across strong edges. The normal
equations form a symmetric positive definite five-point system

    (Id + lam * L_w) u = g

solved by Jacobi-preconditioned conjugate gradients. A dense direct solver is
provided for cross-checking on small instances.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, RangeError, ShapeError, SizeError, SolverError
from .image import Plane, as_plane

_DENSE_LIMIT = 4096


@dataclass(frozen=True)
class WlsParams:
    """Smoothing strength ``lam``, edge sensitivity ``alpha``, weight floor ``epsilon``."""

    lam: float = 2.0
    alpha: float = 2.0
    epsilon: float = 1e-4

    def __post_init__(self):
        if not (math.isfinite(self.lam) and self.lam >= 0.0):
            raise ParameterError(f"lam must be finite and >= 0, got {self.lam}")
        if not (math.isfinite(self.alpha) and self.alpha > 0.0):
            raise ParameterError(f"alpha must be finite and > 0, got {self.alpha}")
        if not (math.isfinite(self.epsilon) and self.epsilon > 0.0):
            raise ParameterError(f"epsilon must be finite and > 0, got {self.epsilon}")


def compute_smoothness_weights(
    guidance: Plane, params: WlsParams = WlsParams()
) -> tuple[np.ndarray, np.ndarray]:
    """Per-edge weights a = (|grad log g|^alpha + epsilon)^-1.

    Returns (ax, ay) with forward differences; entries on the last column of
    ``ax`` and the last row of ``ay`` correspond to no edge and are ignored
    by the assembly. Guidance must be strictly positive.
    """
    g = as_plane(guidance)
    if g.min() <= 0.0:
        raise RangeError("guidance must be strictly positive")
    log_g = np.log(g)
    gx = np.zeros_like(log_g)
    gy = np.zeros_like(log_g)
    gx[:, :-1] = log_g[:, 1:] - log_g[:, :-1]
    gy[:-1, :] = log_g[1:, :] - log_g[:-1, :]
    ax = 1.0 / (np.abs(gx) ** params.alpha + params.epsilon)
    ay = 1.0 / (np.abs(gy) ** params.alpha + params.epsilon)
    return ax, ay


@dataclass
class SparseFivePointSystem:
    """Five-point stencil operator Id + lam * L_w stored as three planes.

    ``east[i, j]`` holds the off-diagonal coefficient coupling (i, j) with
    (i, j + 1); ``south[i, j]`` couples (i, j) with (i + 1, j). Both are
    nonpositive; the final column of ``east`` and final row of ``south``
    are zero.
    """

    height: int
    width: int
    diagonal: np.ndarray
    east: np.ndarray
    south: np.ndarray

    @property
    def n(self) -> int:
        return self.height * self.width

    def matvec(self, u: np.ndarray) -> np.ndarray:
        if u.shape != (self.height, self.width):
            raise ShapeError(
                f"operand shape {u.shape} does not match system "
                f"{(self.height, self.width)}"
            )
        v = self.diagonal * u
        e = self.east[:, :-1]
        v[:, :-1] += e * u[:, 1:]
        v[:, 1:] += e * u[:, :-1]
        s = self.south[:-1, :]
        v[:-1, :] += s * u[1:, :]
        v[1:, :] += s * u[:-1, :]
        return v

    def dense(self) -> np.ndarray:
        """Materialize the full n x n matrix (small systems only)."""
        if self.n > _DENSE_LIMIT:
            raise SizeError(f"refusing to densify a {self.n}-unknown system")
        a = np.zeros((self.n, self.n))
        idx = np.arange(self.n).reshape(self.height, self.width)
        a[idx.ravel(), idx.ravel()] = self.diagonal.ravel()
        p = idx[:, :-1].ravel()
        q = idx[:, 1:].ravel()
        a[p, q] = self.east[:, :-1].ravel()
        a[q, p] = self.east[:, :-1].ravel()
        p = idx[:-1, :].ravel()
        q = idx[1:, :].ravel()
        a[p, q] = self.south[:-1, :].ravel()
        a[q, p] = self.south[:-1, :].ravel()
        return a


def assemble_system(
    ax: np.ndarray, ay: np.ndarray, lam: float
) -> SparseFivePointSystem:
    """Build Id + lam * L_w from edge weights.

    Each edge contributes +lam*w to both endpoint diagonals and -lam*w to the
    two symmetric off-diagonal slots, so rows sum to exactly 1 and the system
    is strictly diagonally dominant with a positive diagonal, hence SPD.
    """
    ax = as_plane(ax)
    ay = as_plane(ay)
    if ax.shape != ay.shape:
        raise ShapeError(f"weight shapes differ: {ax.shape} vs {ay.shape}")
    if not (math.isfinite(lam) and lam >= 0.0):
        raise ParameterError(f"lam must be finite and >= 0, got {lam}")
    if ax.min() < 0.0 or ay.min() < 0.0:
        raise RangeError("smoothness weights must be nonnegative")
    h, w = ax.shape
    east = np.zeros((h, w))
    south = np.zeros((h, w))
    east[:, :-1] = -lam * ax[:, :-1]
    south[:-1, :] = -lam * ay[:-1, :]
    diag = np.ones((h, w))
    diag[:, :-1] -= east[:, :-1]
    diag[:, 1:] -= east[:, :-1]
    diag[:-1, :] -= south[:-1, :]
    diag[1:, :] -= south[:-1, :]
    # SPD sanity: positive diagonal, strict dominance (margin is 1 up to
    # roundoff by construction).
    incident = np.zeros((h, w))
    incident[:, :-1] -= east[:, :-1]
    incident[:, 1:] -= east[:, :-1]
    incident[:-1, :] -= south[:-1, :]
    incident[1:, :] -= south[:-1, :]
    assert np.all(diag > 0.0), "assembled diagonal is not positive"
    assert np.all(diag - incident > 0.5), "assembled system lost diagonal dominance"
    return SparseFivePointSystem(h, w, diag, east, south)


def _pcg(
    system: SparseFivePointSystem,
    rhs: np.ndarray,
    x0: np.ndarray,
    tol: float,
    max_iter: int,
) -> np.ndarray:
    inv_diag = 1.0 / system.diagonal
    x = x0.copy()
    r = rhs - system.matvec(x)
    b_norm = float(np.linalg.norm(rhs))
    if b_norm == 0.0:
        b_norm = 1.0  # zero rhs: fall back to an absolute test
    def energy(u: np.ndarray) -> float:
        return float(0.5 * np.vdot(u, system.matvec(u)) - np.vdot(rhs, u))

    z = inv_diag * r
    rz = float(np.vdot(r, z))
    p = z.copy()
    # CG decreases the quadratic energy monotonically (residual norms
    # oscillate, so they are not the quantity to watch for divergence).
    prev_energy = energy(x)
    for it in range(max_iter):
        rel = float(np.linalg.norm(r)) / b_norm
        if rel <= tol:
            return x
        ap = system.matvec(p)
        pap = float(np.vdot(p, ap))
        if pap <= 0.0 or not math.isfinite(pap):
            raise SolverError(
                f"curvature p'Ap = {pap:g} is not positive at iteration {it}",
                residual=rel,
            )
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        z = inv_diag * r
        rz_new = float(np.vdot(r, z))
        if not math.isfinite(rz_new):
            raise SolverError(
                f"residual became non-finite at iteration {it + 1}", residual=None
            )
        if (it + 1) % 10 == 0:
            cur = energy(x)
            if cur > prev_energy + 1e-12 * (1.0 + abs(prev_energy)):
                raise SolverError(
                    f"energy rose from {prev_energy:g} to {cur:g} at "
                    f"iteration {it + 1}",
                    residual=rel,
                )
            prev_energy = cur
        if rz_new == 0.0:
            rz = rz_new
            continue  # exact solve; the top-of-loop test will exit
        p = z + (rz_new / rz) * p
        rz = rz_new
    rel = float(np.linalg.norm(rhs - system.matvec(x))) / b_norm
    if rel <= tol:
        return x
    raise SolverError(
        f"no convergence after {max_iter} iterations (relative residual {rel:g})",
        residual=rel,
    )


def solve_wls(
    input_plane: Plane,
    guidance: Plane,
    params: WlsParams = WlsParams(),
    tol: float = 1e-6,
    max_iter: int = 2000,
) -> Plane:
    """Smooth ``input_plane`` with weights from ``guidance``.

    Converged when the unpreconditioned relative residual drops to ``tol``.
    The solve warm-starts from the input itself, so ``lam == 0`` returns the
    input unchanged. Raises :class:`SolverError` on divergence or
    non-convergence.
    """
    g = as_plane(input_plane)
    guide = as_plane(guidance)
    if g.shape != guide.shape:
        raise ShapeError(f"input {g.shape} and guidance {guide.shape} shapes differ")
    if not (math.isfinite(tol) and tol > 0.0):
        raise ParameterError(f"tol must be finite and > 0, got {tol}")
    if max_iter < 1:
        raise ParameterError(f"max_iter must be >= 1, got {max_iter}")
    ax, ay = compute_smoothness_weights(guide, params)
    system = assemble_system(ax, ay, params.lam)
    return _pcg(system, g, g, tol, max_iter)


def dense_oracle_solve(
    input_plane: Plane, guidance: Plane, params: WlsParams = WlsParams()
) -> Plane:
    """Reference solve via the materialized dense system and LAPACK.

    Only intended for validation; refuses instances above 4096 unknowns
    with :class:`SizeError`.
    """
    g = as_plane(input_plane)
    guide = as_plane(guidance)
    if g.shape != guide.shape:
        raise ShapeError(f"input {g.shape} and guidance {guide.shape} shapes differ")
    if g.size > _DENSE_LIMIT:
        raise SizeError(
            f"dense oracle limited to {_DENSE_LIMIT} unknowns, got {g.size}"
        )
    ax, ay = compute_smoothness_weights(guide, params)
    h, w = g.shape
    n = h * w
    lam = params.lam
    a = np.eye(n)
    idx = np.arange(n).reshape(h, w)
    for i in range(h):
        for j in range(w):
            p = idx[i, j]
            if j + 1 < w:
                q = idx[i, j + 1]
                wgt = lam * ax[i, j]
                a[p, p] += wgt
                a[q, q] += wgt
                a[p, q] -= wgt
                a[q, p] -= wgt
            if i + 1 < h:
                q = idx[i + 1, j]
                wgt = lam * ay[i, j]
                a[p, p] += wgt
                a[q, q] += wgt
                a[p, q] -= wgt
                a[q, p] -= wgt
    return np.linalg.solve(a, g.ravel()).reshape(h, w)
