"""Closed-form free-space kernel for L = -div(A grad) + b . grad on R^3.

For constant symmetric positive definite A and constant drift b the kernel has
the explicit form

    Gamma(x, y) = det(A)^(-1/2) * exp(c . (xt - yt) / 2) * Phi_k(|xt - yt|),

where xt = A^(-1/2) x, c = A^(-1/2) b, k = |c|/2 and
Phi_k(r) = exp(-k r) / (4 pi r) is the screened Coulomb kernel.  The kernel of
the adjoint operator L^t u = -div(A grad u) - b . grad u is the same formula
with b replaced by -b, and satisfies Gamma_adj(x, y) = Gamma(y, x).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class PoleError(ValueError):
    """Evaluation requested too close to the kernel pole."""


POLE_GUARD = 1e-14


def _sym_sqrt_inv(A: np.ndarray) -> tuple[np.ndarray, float]:
    """Inverse square root and det^(-1/2) of an SPD matrix via eigh."""
    w, V = np.linalg.eigh(A)
    if np.any(w <= 0):
        raise ValueError(f"coefficient matrix is not positive definite (eigenvalues {w})")
    M = (V * (1.0 / np.sqrt(w))) @ V.T
    return M, float(1.0 / np.sqrt(np.prod(w)))


@dataclass
class Coefficients:
    """Constant coefficients (A, b) with optional affine antisymmetric part.

    A: (3,3) symmetric positive definite.
    b: (3,) constant drift.
    antisym_affine: optional (3,3,3); slice k is a constant antisymmetric
        matrix C_k and the full matrix field is A_full(x) = A + sum_k x_k C_k.
        Only the symmetrization routine consumes this part; the kernel and the
        layer potentials always use the constant (A, b).

    Derived quantities (A^(-1/2), det(A)^(-1/2), c = A^(-1/2) b, kappa = |c|/2)
    are computed once at construction.
    """

    A: np.ndarray
    b: np.ndarray
    antisym_affine: np.ndarray | None = None
    A_inv_sqrt: np.ndarray = field(init=False, repr=False)
    A_inv: np.ndarray = field(init=False, repr=False)
    det_inv_sqrt: float = field(init=False, repr=False)
    c: np.ndarray = field(init=False, repr=False)
    kappa: float = field(init=False, repr=False)
    ellipticity: float = field(init=False, repr=False)

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float).reshape(3, 3)
        self.b = np.asarray(self.b, dtype=float).reshape(3)
        if not np.allclose(self.A, self.A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(self.A).max())):
            raise ValueError("coefficient matrix A must be symmetric")
        self.A = 0.5 * (self.A + self.A.T)
        self.A_inv_sqrt, self.det_inv_sqrt = _sym_sqrt_inv(self.A)
        self.A_inv = self.A_inv_sqrt @ self.A_inv_sqrt
        self.c = self.A_inv_sqrt @ self.b
        self.kappa = 0.5 * float(np.linalg.norm(self.c))
        w = np.linalg.eigvalsh(self.A)
        self.ellipticity = float(w[0] / w[-1])  # lambda^2 in the usual normalization
        if self.antisym_affine is not None:
            C = np.asarray(self.antisym_affine, dtype=float).reshape(3, 3, 3)
            for k in range(3):
                if not np.allclose(C[k], -C[k].T, rtol=0, atol=1e-12 * max(1.0, np.abs(C).max())):
                    raise ValueError(f"antisym_affine slice {k} is not antisymmetric")
            self.antisym_affine = C

    # -- convenience ---------------------------------------------------------
    @classmethod
    def laplace(cls) -> "Coefficients":
        return cls(A=np.eye(3), b=np.zeros(3))

    def adjoint(self) -> "Coefficients":
        """Coefficients of L^t (constant b: same A, reversed drift)."""
        return Coefficients(A=self.A.copy(), b=-self.b)

    def matrix_at(self, x: np.ndarray) -> np.ndarray:
        """A_full(x) = A + sum_k x_k C_k for the affine antisymmetric family."""
        if self.antisym_affine is None:
            return self.A
        x = np.asarray(x, dtype=float)
        return self.A + np.einsum("k,kij->ij", x, self.antisym_affine)

    def is_laplace(self) -> bool:
        return np.allclose(self.A, np.eye(3)) and np.allclose(self.b, 0.0)


def _checked_difference(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    delta = x - y
    r = np.linalg.norm(np.atleast_2d(delta), axis=-1)
    scale = 1.0 + max(float(np.abs(x).max()), float(np.abs(y).max()))
    if np.any(r < POLE_GUARD * scale):
        raise PoleError("kernel evaluated on (or numerically at) its pole")
    return delta


def fundamental_solution(coeffs: Coefficients, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Gamma(x, y); broadcasts over leading dimensions of x and y."""
    delta = _checked_difference(x, y)
    dt = delta @ coeffs.A_inv_sqrt          # A^(-1/2) symmetric, so right-multiply works
    rt = np.sqrt(np.sum(dt * dt, axis=-1))
    g = 0.5 * (dt @ coeffs.c) - coeffs.kappa * rt
    return coeffs.det_inv_sqrt * np.exp(g) / (4.0 * np.pi * rt)


def fundamental_solution_gradient(coeffs: Coefficients, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """grad_x Gamma(x, y) in closed form."""
    delta = _checked_difference(x, y)
    dt = delta @ coeffs.A_inv_sqrt
    rt = np.sqrt(np.sum(dt * dt, axis=-1))[..., None]
    dhat = dt / rt
    gamma = coeffs.det_inv_sqrt * np.exp(0.5 * (dt @ coeffs.c)[..., None] - coeffs.kappa * rt) / (4.0 * np.pi * rt)
    vec = 0.5 * coeffs.c - coeffs.kappa * dhat - dhat / rt
    return gamma * (vec @ coeffs.A_inv_sqrt)


def fundamental_solution_with_gradient(coeffs: Coefficients, x: np.ndarray,
                                       y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(Gamma, grad_x Gamma) sharing the intermediate factors.

    Matches the two separate evaluators to rounding; used where both are
    needed on large point sets.
    """
    delta = _checked_difference(x, y)
    dt = delta @ coeffs.A_inv_sqrt
    rt = np.sqrt(np.sum(dt * dt, axis=-1))[..., None]
    dhat = dt / rt
    gamma = coeffs.det_inv_sqrt * np.exp(0.5 * (dt @ coeffs.c)[..., None]
                                         - coeffs.kappa * rt) / (4.0 * np.pi * rt)
    vec = 0.5 * coeffs.c - coeffs.kappa * dhat - dhat / rt
    return gamma[..., 0], gamma * (vec @ coeffs.A_inv_sqrt)


def adjoint_solution(coeffs: Coefficients, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Kernel of the adjoint operator, evaluated with the reversed drift.

    Equals fundamental_solution(coeffs, y, x); both routes are kept so tests
    can pin the identity numerically.
    """
    return fundamental_solution(coeffs.adjoint(), x, y)


def adjoint_solution_gradient(coeffs: Coefficients, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """grad_x of the adjoint kernel."""
    return fundamental_solution_gradient(coeffs.adjoint(), x, y)


def conormal_kernel(coeffs: Coefficients, x: np.ndarray, q: np.ndarray,
                    normal: np.ndarray, operator: str = "direct") -> np.ndarray:
    """Conormal derivative of the kernel in the boundary argument q.

    operator='direct':  <A grad_q Gamma(x, q), nu(q)>, computed from the
        translation invariance grad_q Gamma(x, q) = -grad_1 Gamma(x, q).
    operator='adjoint': <A grad_q Gamma_adj(q, x), nu(q)>, computed from the
        first-argument gradient of the reversed-drift kernel.

    The two routes evaluate the same function (Gamma(x, q) = Gamma_adj(q, x),
    A symmetric) through independent code paths; tests pin their agreement.
    """
    if operator == "direct":
        grad_q = -fundamental_solution_gradient(coeffs, x, q)
    elif operator == "adjoint":
        grad_q = adjoint_solution_gradient(coeffs, q, x)
    else:
        raise ValueError(f"operator must be 'direct' or 'adjoint', got {operator!r}")
    return np.sum((grad_q @ coeffs.A) * np.asarray(normal, dtype=float), axis=-1)
