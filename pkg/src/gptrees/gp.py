"""Gaussian-process machinery for the leaf models.

A leaf over rows X carries the anisotropic exponentiated-quadratic kernel

    omega[i, k] = exp(-0.5 * sum_j (x_i[j] - x_k[j])^2 / ls[j]^2) / nu

with a small relative nugget on the diagonal, and the rank-one inflation

    lam = omega + 11^T / tau_mu

that absorbs the marginalised constant leaf mean.  The leaf residuals are
then MVN(0, I/tau + lam), which is the only density the tree sampler needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from numpy.linalg import LinAlgError
from scipy.linalg import cho_solve, cholesky as _scipy_cholesky, solve_triangular

LOG_2PI = float(np.log(2.0 * np.pi))


class NumericsError(RuntimeError):
    """Raised when a kernel matrix cannot be factorised even after nugget escalation."""


@dataclass(frozen=True)
class KernelState:
    """Per-tree kernel parameters: one length-scale per GP column."""

    lengthscales: np.ndarray
    nu: float
    tau_mu: float
    nugget: float = 1e-8
    nugget_max: float = 1e-4

    def __post_init__(self):
        # own copy: callers may mutate their length-scale vectors in place
        ls = np.array(self.lengthscales, dtype=float, copy=True)
        object.__setattr__(self, "lengthscales", ls)
        if np.any(ls <= 0.0):
            raise ValueError("length-scales must be positive")
        if self.nu <= 0.0 or self.tau_mu <= 0.0:
            raise ValueError("precisions must be positive")

    def replace_dim(self, j: int, value: float) -> "KernelState":
        ls = self.lengthscales.copy()
        ls[j] = value
        return KernelState(ls, self.nu, self.tau_mu, self.nugget, self.nugget_max)


def scaled_exponent(X: np.ndarray, lengthscales) -> np.ndarray:
    """sum_j (x_i[j] - x_k[j])^2 / ls_j^2, built one dimension at a time."""
    X = np.asarray(X, dtype=float)
    ls = np.asarray(lengthscales, dtype=float)
    n = X.shape[0]
    out = np.zeros((n, n))
    for j in range(X.shape[1]):
        d = X[:, j][:, None] - X[:, j][None, :]
        np.multiply(d, d, out=d)
        d /= ls[j] ** 2
        out += d
    return out


def kernel_matrix(X: np.ndarray, lengthscales, nu: float, nugget: float) -> np.ndarray:
    """Exponentiated-quadratic kernel over the rows of X.

    Off-diagonal entry (i, k) is exp(-0.5 sum_j d_ij^2/ls_j^2)/nu; the
    diagonal is (1 + nugget)/nu exactly.
    """
    X = np.asarray(X, dtype=float)
    ls = np.asarray(lengthscales, dtype=float)
    if np.any(ls <= 0.0):
        raise ValueError("length-scales must be positive")
    scaled = X / ls
    sq = np.sum(scaled * scaled, axis=1)
    expo = sq[:, None] + sq[None, :] - 2.0 * (scaled @ scaled.T)
    np.maximum(expo, 0.0, out=expo)
    omega = np.exp(-0.5 * expo) / nu
    np.fill_diagonal(omega, (1.0 + nugget) / nu)
    return omega


def cross_kernel(X: np.ndarray, X_star: np.ndarray, lengthscales, nu: float) -> np.ndarray:
    """Cross-covariance block between two row sets, shape (n, n_star)."""
    ls = np.asarray(lengthscales, dtype=float)
    a = np.asarray(X, dtype=float) / ls
    b = np.asarray(X_star, dtype=float) / ls
    sa = np.sum(a * a, axis=1)
    sb = np.sum(b * b, axis=1)
    expo = sa[:, None] + sb[None, :] - 2.0 * (a @ b.T)
    np.maximum(expo, 0.0, out=expo)
    return np.exp(-0.5 * expo) / nu


@dataclass
class CovarianceBundle:
    """Kernel matrices for one leaf, with factorisation caches.

    ``omega`` is the leaf kernel, ``lam`` adds the 11^T/tau_mu term.  The
    Cholesky of (I/tau + lam) is cached per noise precision; the Cholesky of
    lam itself is cached for prior draws and prediction.  Bundles are
    rebuilt whenever the leaf's rows or the tree's length-scales change.
    """

    X: np.ndarray
    kern: KernelState
    omega: np.ndarray
    lam: np.ndarray
    exponent: Optional[np.ndarray] = None
    _noise_tau: float = field(default=np.nan, repr=False)
    _noise_chol: Optional[tuple] = field(default=None, repr=False)
    _noise_logdet: float = field(default=np.nan, repr=False)
    _lam_chol: Optional[tuple] = field(default=None, repr=False)

    @property
    def n(self) -> int:
        return self.lam.shape[0]

    def gamma(self, tau: float) -> np.ndarray:
        """Noise-plus-kernel matrix I/tau + omega (mean not marginalised)."""
        return self.omega + (1.0 / tau) * np.eye(self.n)

    def noise_chol(self, tau: float):
        if self._noise_chol is None or self._noise_tau != tau:
            mat = self.lam.copy()
            mat.flat[:: self.n + 1] += 1.0 / tau
            L = _chol_with_escalation(mat, self.kern, self.n)
            self._noise_chol = (L, True)
            self._noise_tau = tau
            self._noise_logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
        return self._noise_chol, self._noise_logdet

    def lam_chol(self):
        if self._lam_chol is None:
            L = _chol_with_escalation(self.lam, self.kern, self.n)
            self._lam_chol = (L, True)
        return self._lam_chol


def _chol_with_escalation(mat: np.ndarray, kern: KernelState, n: int) -> np.ndarray:
    """Lower Cholesky factor, retrying with a growing diagonal bump.

    Never factorises in place: a failed potrf leaves its input partially
    overwritten, and the retries need the original matrix.
    """
    try:
        return _scipy_cholesky(mat, lower=True, check_finite=False)
    except LinAlgError:
        pass
    base = 1.0 / kern.nu
    bump = max(kern.nugget, 1e-9) * 10.0
    while bump <= kern.nugget_max:
        try:
            return np.linalg.cholesky(mat + bump * base * np.eye(n))
        except LinAlgError:
            bump *= 10.0
    cond = float(np.linalg.cond(mat))
    raise NumericsError(
        f"Cholesky failed for a {n}x{n} leaf covariance even with nugget "
        f"{kern.nugget_max:g} (condition estimate {cond:.3e})"
    )


def build_bundle(X: np.ndarray, kern: KernelState) -> CovarianceBundle:
    """Assemble the kernel matrices for one leaf."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("leaf requires a 2-d row matrix with at least one row")
    omega = kernel_matrix(X, kern.lengthscales, kern.nu, kern.nugget)
    lam = omega + 1.0 / kern.tau_mu
    return CovarianceBundle(X=X, kern=kern, omega=omega, lam=lam)


def rescale_dim(bundle: CovarianceBundle, j: int, new_ls: float) -> CovarianceBundle:
    """Bundle with length-scale j replaced.

    The exponent matrix is cached on the source bundle the first time any
    dimension is updated, after which each update costs one rank-free
    n x n correction and one exponential instead of a full kernel rebuild.
    """
    if bundle.exponent is None:
        bundle.exponent = scaled_exponent(bundle.X, bundle.kern.lengthscales)
    old = bundle.kern.lengthscales[j]
    kern = bundle.kern.replace_dim(j, new_ls)
    col = bundle.X[:, j]
    d = col[:, None] - col[None, :]
    np.multiply(d, d, out=d)
    exponent = bundle.exponent + (1.0 / new_ls**2 - 1.0 / old**2) * d
    omega = np.exp(-0.5 * exponent)
    omega /= kern.nu
    np.fill_diagonal(omega, (1.0 + kern.nugget) / kern.nu)
    lam = omega + 1.0 / kern.tau_mu
    return CovarianceBundle(X=bundle.X, kern=kern, omega=omega, lam=lam,
                            exponent=exponent)


def leaf_log_marginal(resid: np.ndarray, bundle: CovarianceBundle, tau: float) -> float:
    """Log density of MVN(0, I/tau + lam) at the leaf residual vector.

    This is the leaf likelihood with both the constant mean and the GP
    values integrated out.
    """
    resid = np.asarray(resid, dtype=float)
    if resid.shape[0] != bundle.n:
        raise ValueError("residual length does not match the bundle dimension")
    (L, _lower), logdet = bundle.noise_chol(tau)
    half = solve_triangular(L, resid, lower=True, check_finite=False)
    return -0.5 * (bundle.n * LOG_2PI + logdet + float(half @ half))


def leaf_conditional(resid: np.ndarray, bundle: CovarianceBundle, tau: float):
    """Posterior mean and covariance of the leaf values given its residuals.

    mean = lam (I/tau + lam)^-1 r, cov = lam - lam (I/tau + lam)^-1 lam.
    """
    resid = np.asarray(resid, dtype=float)
    cf, _ = bundle.noise_chol(tau)
    mean = bundle.lam @ cho_solve(cf, resid, check_finite=False)
    cov = bundle.lam - bundle.lam @ cho_solve(cf, bundle.lam, check_finite=False)
    cov = 0.5 * (cov + cov.T)
    return mean, cov


def sample_leaf_values(resid: np.ndarray, bundle: CovarianceBundle, tau: float, rng) -> np.ndarray:
    """One exact draw from the leaf-value full conditional.

    Uses the joint-draw decomposition: draw v0 from the value prior and e
    from the noise, then correct by the conditional-mean operator.  The
    result is distributed MVN(mean, cov) of :func:`leaf_conditional` while
    costing one extra Cholesky instead of an eigendecomposition.
    """
    resid = np.asarray(resid, dtype=float)
    n = bundle.n
    L, _lower = bundle.lam_chol()
    v0 = L @ rng.standard_normal(n)
    eps = rng.standard_normal(n) / np.sqrt(tau)
    cf, _ = bundle.noise_chol(tau)
    return v0 + bundle.lam @ cho_solve(cf, resid - v0 - eps, check_finite=False)


def sample_leaf_prior(bundle: CovarianceBundle, rng) -> np.ndarray:
    """Draw leaf values from their prior MVN(0, lam)."""
    L, _lower = bundle.lam_chol()
    return L @ rng.standard_normal(bundle.n)


def _coincident_pairs(X: np.ndarray, X_star: np.ndarray) -> list:
    """(train i, test k) pairs with bitwise-identical rows; first i wins."""
    index = {}
    for i in range(X.shape[0] - 1, -1, -1):
        index[X[i].tobytes()] = i
    return [(index[key], k) for k in range(X_star.shape[0])
            if (key := X_star[k].tobytes()) in index]


def _cross_lam(X: np.ndarray, X_star: np.ndarray, kern: KernelState,
               pairs=None) -> np.ndarray:
    # coincident pairs carry the same nugget as the train diagonal so the
    # cross block at an observed site equals the train block's column
    lam_star = cross_kernel(X, X_star, kern.lengthscales, kern.nu) + 1.0 / kern.tau_mu
    for i, k in (pairs if pairs is not None else _coincident_pairs(X, X_star)):
        lam_star[i, k] += kern.nugget / kern.nu
    return lam_star


def _refined_solve(cf, mat: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cholesky solve with one step of iterative refinement.

    The smooth kernel makes lam ill-conditioned; a refinement pass pulls
    lam^-1 b much closer to the exact solution for one extra matvec.
    """
    x = cho_solve(cf, b, check_finite=False)
    x += cho_solve(cf, b - mat @ x, check_finite=False)
    return x


def gp_predict(values: np.ndarray, X_node: np.ndarray, X_star: np.ndarray,
               kern: KernelState, bundle: Optional[CovarianceBundle] = None):
    """Condition the leaf GP on its sampled values at new covariate rows.

    Returns (mean, cov) with mean = lam_star^T lam^-1 values and
    cov = lam_starstar - lam_star^T lam^-1 lam_star; all blocks include the
    11^T/tau_mu term of the marginalised leaf mean.  Test rows that
    coincide with a stored site take that site's value exactly (the
    identity lam_star = lam makes the formula a no-op there, so the stored
    value is the exact answer regardless of kernel conditioning).
    """
    X_star = np.asarray(X_star, dtype=float)
    values = np.asarray(values, dtype=float)
    if X_star.size == 0:
        return np.zeros(0), np.zeros((0, 0))
    if bundle is None:
        bundle = build_bundle(X_node, kern)
    pairs = _coincident_pairs(bundle.X, X_star)
    lam_star = _cross_lam(bundle.X, X_star, kern, pairs)
    cf = bundle.lam_chol()
    solved = _refined_solve(cf, bundle.lam, lam_star)
    mean = solved.T @ values
    omega_ss = kernel_matrix(X_star, kern.lengthscales, kern.nu, kern.nugget)
    lam_ss = omega_ss + 1.0 / kern.tau_mu
    cov = lam_ss - lam_star.T @ solved
    for i, k in pairs:
        mean[k] = values[i]
    return mean, 0.5 * (cov + cov.T)


def gp_predict_mean(values: np.ndarray, X_star: np.ndarray,
                    bundle: CovarianceBundle, alpha: Optional[np.ndarray] = None) -> np.ndarray:
    """Predictive mean only; ``alpha = lam^-1 values`` may be precomputed."""
    X_star = np.asarray(X_star, dtype=float)
    values = np.asarray(values, dtype=float)
    if X_star.size == 0:
        return np.zeros(0)
    if alpha is None:
        alpha = _refined_solve(bundle.lam_chol(), bundle.lam, values)
    pairs = _coincident_pairs(bundle.X, X_star)
    mean = _cross_lam(bundle.X, X_star, bundle.kern, pairs).T @ alpha
    for i, k in pairs:
        mean[k] = values[i]
    return mean
