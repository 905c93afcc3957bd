"""Noise-free Gaussian process regression with an ARD squared-exponential kernel.

Hyperparameters are fitted by maximising the log marginal likelihood with
L-BFGS-B from several deterministic starts. Inputs are scaled to the unit
box of the training data and targets standardised; predictions are mapped
back, including the input gradient of the posterior mean.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky
from scipy.optimize import minimize
from scipy.spatial.distance import pdist

from .exceptions import FitError, IllConditionedError
from .sampling import sobol_sample

logger = logging.getLogger(__name__)

DUPLICATE_TOL = 1e-12
INTERPOLATION_RTOL = 1e-8
INTERPOLATION_MARGIN = 0.1
LENGTHSCALE_BACKOFF = 0.8


@dataclass(frozen=True)
class Kernel:
    sigma_f: float
    lengthscales: Tuple[float, ...]

    def __post_init__(self):
        if not self.sigma_f > 0 or not all(ell > 0 for ell in self.lengthscales):
            raise ValueError(
                f"Kernel parameters must be positive: sigma_f={self.sigma_f}, "
                f"lengthscales={self.lengthscales}"
            )

    @property
    def dimension(self) -> int:
        return len(self.lengthscales)

    @property
    def theta(self) -> np.ndarray:
        """Log hyperparameters [log sigma_f, log l_1, ...]."""
        return np.log(np.concatenate([[self.sigma_f], self.lengthscales]))

    @classmethod
    def from_theta(cls, theta: np.ndarray) -> "Kernel":
        p = np.exp(np.asarray(theta, dtype=float))
        return cls(float(p[0]), tuple(float(v) for v in p[1:]))

    def __call__(self, x1: np.ndarray, x2: np.ndarray) -> np.ndarray:
        """Kernel matrix between the rows of ``x1`` and ``x2``."""
        ell = np.asarray(self.lengthscales)
        d = (np.atleast_2d(x1)[:, None, :] - np.atleast_2d(x2)[None, :, :]) / ell
        return self.sigma_f**2 * np.exp(-0.5 * np.sum(d * d, axis=-1))


def kernel_eval(kernel: Kernel, x: np.ndarray, x2: np.ndarray) -> float:
    x, x2 = np.asarray(x, dtype=float), np.asarray(x2, dtype=float)
    if x.shape != (kernel.dimension,) or x2.shape != (kernel.dimension,):
        raise ValueError(
            f"Kernel of dimension {kernel.dimension} evaluated at {x.shape}, {x2.shape}"
        )
    return float(kernel(x, x2)[0, 0])


@dataclass(frozen=True)
class GprOptions:
    n_starts: int = 8
    bounds: Tuple[float, float] = (1e-2, 1e2)
    jitter: float = 1e-10
    max_jitter: float = 1e-6
    max_iter: int = 200


def _factorize(
    k: np.ndarray, sigma_f: float, jitter: float, max_jitter: float
) -> Tuple[np.ndarray, float]:
    """Cholesky factor of k + jitter * sigma_f^2 I, escalating the jitter."""
    eye = np.eye(k.shape[0])
    while True:
        try:
            return cholesky(k + jitter * sigma_f**2 * eye, lower=True), jitter
        except LinAlgError:
            if jitter * 10.0 > max_jitter * (1.0 + 1e-12):
                raise
            jitter *= 10.0
            logger.debug(f"Kernel matrix not positive definite, jitter -> {jitter:.1e}")


class GprModel:
    """Fitted or conditioned Gaussian process for one scalar output.

    Construct with :func:`fit` or :func:`condition`; instances are not
    modified after construction.
    """

    def __init__(
        self,
        kernel: Kernel,
        train_inputs: np.ndarray,
        train_targets: np.ndarray,
        input_lo: np.ndarray,
        input_scale: np.ndarray,
        target_mean: float = 0.0,
        target_scale: float = 1.0,
        jitter: float = 1e-10,
        max_jitter: float = 1e-6,
    ):
        self.kernel = kernel
        self.train_inputs = np.asarray(train_inputs, dtype=float)
        self.train_targets = np.asarray(train_targets, dtype=float)
        self.input_lo = np.asarray(input_lo, dtype=float)
        self.input_scale = np.asarray(input_scale, dtype=float)
        self.target_mean = float(target_mean)
        self.target_scale = float(target_scale)
        k = kernel(self.train_inputs, self.train_inputs)
        try:
            self.factor, self.jitter = _factorize(k, kernel.sigma_f, jitter, max_jitter)
        except LinAlgError as e:
            raise IllConditionedError(
                f"Kernel matrix is not positive definite even with jitter {max_jitter}"
            ) from e
        if self.jitter > jitter:
            logger.warning(f"Kernel jitter escalated to {self.jitter:.1e}")
        self.solved_weights = cho_solve((self.factor, True), self.train_targets)

    @property
    def n_train(self) -> int:
        return int(self.train_inputs.shape[0])

    def _normalize(self, x: np.ndarray) -> Tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.shape[1] != self.kernel.dimension:
            raise ValueError(
                f"Model has input dimension {self.kernel.dimension}, got {x.shape[1]}"
            )
        return (x - self.input_lo) / self.input_scale, single

    def predict_mean(self, x: np.ndarray):
        z, single = self._normalize(x)
        m = self.kernel(z, self.train_inputs) @ self.solved_weights
        m = self.target_mean + self.target_scale * m
        return float(m[0]) if single else m

    def predict_variance(self, x: np.ndarray):
        z, single = self._normalize(x)
        ks = self.kernel(self.train_inputs, z)
        v = cho_solve((self.factor, True), ks)
        var = self.kernel.sigma_f**2 - np.sum(ks * v, axis=0)
        var = np.maximum(var, 0.0) * self.target_scale**2
        return float(var[0]) if single else var

    def predict_gradient(self, x: np.ndarray) -> np.ndarray:
        """d m / d x, shape ``(d,)`` for one point or ``(n, d)``."""
        z, single = self._normalize(x)
        ks = self.kernel(z, self.train_inputs)  # (n, N)
        ell2 = np.asarray(self.kernel.lengthscales) ** 2
        diff = self.train_inputs[None, :, :] - z[:, None, :]
        grad = np.einsum("nm,m,nmk->nk", ks, self.solved_weights, diff) / ell2
        grad = grad * self.target_scale / self.input_scale
        return grad[0] if single else grad

    def log_marginal_likelihood(self) -> float:
        """Log marginal likelihood of the (standardised) training targets."""
        return -_negative_lml(
            self.kernel.theta, self.train_inputs, self.train_targets,
            self.jitter, self.jitter,
        )[0]

    def to_arrays(self) -> Dict[str, np.ndarray]:
        return {
            "sigma_f": np.array(self.kernel.sigma_f),
            "lengthscales": np.asarray(self.kernel.lengthscales),
            "train_inputs": self.train_inputs,
            "train_targets": self.train_targets,
            "input_lo": self.input_lo,
            "input_scale": self.input_scale,
            "target_mean": np.array(self.target_mean),
            "target_scale": np.array(self.target_scale),
            "jitter": np.array(self.jitter),
            "factor": self.factor,
            "solved_weights": self.solved_weights,
        }

    @classmethod
    def from_arrays(cls, data: Dict[str, np.ndarray]) -> "GprModel":
        model = cls.__new__(cls)
        model.kernel = Kernel(
            float(data["sigma_f"]), tuple(float(v) for v in data["lengthscales"])
        )
        model.train_inputs = np.asarray(data["train_inputs"], dtype=float)
        model.train_targets = np.asarray(data["train_targets"], dtype=float)
        model.input_lo = np.asarray(data["input_lo"], dtype=float)
        model.input_scale = np.asarray(data["input_scale"], dtype=float)
        model.target_mean = float(data["target_mean"])
        model.target_scale = float(data["target_scale"])
        model.jitter = float(data["jitter"])
        model.factor = np.asarray(data["factor"], dtype=float)
        model.solved_weights = np.asarray(data["solved_weights"], dtype=float)
        return model


def condition(
    x: np.ndarray, y: np.ndarray, kernel: Kernel, jitter: float = 1e-10
) -> GprModel:
    """Posterior of a zero-mean GP with fixed ``kernel`` on raw inputs."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    d = x.shape[1]
    return GprModel(
        kernel, x, np.asarray(y, dtype=float), np.zeros(d), np.ones(d),
        jitter=jitter, max_jitter=max(jitter, 1e-6),
    )


def _negative_lml(
    theta: np.ndarray, z: np.ndarray, t: np.ndarray, jitter: float, max_jitter: float
) -> Tuple[float, np.ndarray]:
    kernel = Kernel.from_theta(theta)
    k = kernel(z, z)
    try:
        factor, used = _factorize(k, kernel.sigma_f, jitter, max_jitter)
    except LinAlgError:
        return np.inf, np.zeros_like(theta)
    alpha = cho_solve((factor, True), t)
    n = t.shape[0]
    nll = 0.5 * t @ alpha + np.sum(np.log(np.diag(factor)))
    nll += 0.5 * n * np.log(2 * np.pi)

    inner = np.outer(alpha, alpha) - cho_solve((factor, True), np.eye(n))
    kj = k + used * kernel.sigma_f**2 * np.eye(n)
    grads = [np.sum(inner * 2.0 * kj)]
    for dim, ell in enumerate(kernel.lengthscales):
        d2 = (z[:, None, dim] - z[None, :, dim]) ** 2 / ell**2
        grads.append(np.sum(inner * k * d2))
    return float(nll), -0.5 * np.array(grads)


def _interpolation_residual(
    theta: np.ndarray, z: np.ndarray, t: np.ndarray, jitter: float
) -> float:
    """Largest training-point error of the posterior mean at fixed base jitter."""
    kernel = Kernel.from_theta(theta)
    k = kernel(z, z)
    try:
        factor = cholesky(k + jitter * kernel.sigma_f**2 * np.eye(len(t)), lower=True)
    except LinAlgError:
        return np.inf
    return float(np.abs(k @ cho_solve((factor, True), t) - t).max())


def _shorten_until_interpolating(
    theta: np.ndarray,
    z: np.ndarray,
    t: np.ndarray,
    jitter: float,
    tol: float,
    log_lo: float,
) -> Optional[np.ndarray]:
    """Shrink the lengthscales of ``theta`` until the data is reproduced to ``tol``.

    Returns None when even the smallest admissible lengthscales fail.
    """
    theta = np.array(theta, dtype=float)
    while _interpolation_residual(theta, z, t, jitter) > tol:
        if np.all(theta[1:] <= log_lo):
            return None
        theta[1:] = np.maximum(theta[1:] + np.log(LENGTHSCALE_BACKOFF), log_lo)
    return theta


def fit(x: np.ndarray, y: np.ndarray, opts: Optional[GprOptions] = None) -> GprModel:
    """Maximum-likelihood fit of an ARD GP to ``(x, y)``.

    Only hyperparameters whose posterior mean reproduces every training target
    to ``INTERPOLATION_RTOL * max(1, max|y|)`` with the base jitter are
    accepted. Optimizer results that are too ill-conditioned for that get
    their lengthscales shortened until they are.
    """
    opts = opts or GprOptions()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).ravel()
    n, d = x.shape
    if n < 2:
        raise ValueError(f"GP regression needs at least 2 training points, got {n}")
    if y.shape[0] != n:
        raise ValueError(f"{n} inputs but {y.shape[0]} targets")

    lo = x.min(axis=0)
    scale = x.max(axis=0) - lo
    scale[scale == 0.0] = 1.0
    z = (x - lo) / scale
    if pdist(z).min() < DUPLICATE_TOL:
        raise IllConditionedError("Duplicate training inputs make the kernel singular")
    mean = float(y.mean())
    std = float(y.std())
    if not std > 0.0:
        std = 1.0
    t = (y - mean) / std
    # residual budget in standardized units, a decade inside the public tolerance
    tol = INTERPOLATION_MARGIN * INTERPOLATION_RTOL * np.abs(y).max() / std

    log_lo, log_hi = np.log(opts.bounds)
    bounds = [(log_lo, log_hi)] * (d + 1)
    starts = sobol_sample(opts.n_starts, bounds)

    candidates = []
    failures = []
    for i, theta0 in enumerate(starts):
        candidates.append(np.asarray(theta0))
        try:
            res = minimize(
                _negative_lml, theta0, args=(z, t, opts.jitter, opts.max_jitter),
                jac=True, method="L-BFGS-B", bounds=bounds,
                options={"maxiter": opts.max_iter},
            )
            candidates.append(np.asarray(res.x))
            logger.debug(f"GP start {i}: nll -> {res.fun:.6g} ({res.message})")
        except (ValueError, FloatingPointError) as e:
            failures.append(f"start {i}: {e}")
    if len(failures) == len(starts):
        raise FitError(
            f"Likelihood optimisation failed from all {opts.n_starts} starts: "
            + "; ".join(failures)
        )

    best: Optional[Tuple[float, np.ndarray]] = None
    for theta in candidates:
        feasible = _shorten_until_interpolating(theta, z, t, opts.jitter, tol, log_lo)
        if feasible is None:
            continue
        value, _ = _negative_lml(feasible, z, t, opts.jitter, opts.jitter)
        if np.isfinite(value) and (best is None or value < best[0]):
            best = (value, feasible)
    if best is None:
        raise IllConditionedError(
            f"No hyperparameters in {opts.bounds} reproduce the {n} training "
            f"targets to relative {INTERPOLATION_RTOL:.0e}"
        )

    model = GprModel(
        Kernel.from_theta(best[1]), z, t, lo, scale, mean, std,
        jitter=opts.jitter, max_jitter=opts.jitter,
    )
    residual = float(np.abs(model.predict_mean(x) - y).max())
    if residual > INTERPOLATION_RTOL * max(1.0, float(np.abs(y).max())):
        raise IllConditionedError(f"GP misses its training targets by {residual:.3e}")
    logger.debug(f"GP training residual {residual:.3e}")
    return model
