"""Reconstruct a full cube from point spectra and band images.

Model: unfolded cube S (pixels x bands) is observed through a row-selection
operator L (point spectra H = L S + noise) and a band-selection operator B
(band images M = S B + noise). Each pixel spectrum is represented in a PCA
subspace, s_i = r_i Q + mean, and the coefficient image R is recovered by
minimizing

    1/(2 sigma_H^2) ||H - L R Q||_F^2
  + 1/(2 sigma_M^2) ||M - R Q B||_F^2
  + eta * pen(R)

with pen either the elementwise l1 norm or the nuclear norm, via ADMM with
the split V = R. The R-update separates per pixel into one of two shared
(Z~ x Z~) linear systems (H-sampled pixels vs the rest), so the solver scales
linearly in the pixel count.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .hypercube import BandStack, HyperCube, SpectrumSet

__all__ = [
    "SubspaceModel",
    "ReducedImage",
    "FusionOperators",
    "SolverConfig",
    "AdmmResult",
    "FusionResult",
    "FusionError",
    "AdmmDivergenceError",
    "fit_subspace",
    "map_initialize",
    "admm_solve",
    "reconstruct_cube",
    "fuse",
    "run_fusion",
    "build_operators",
    "estimate_noise_variance",
    "soft_threshold",
    "write_convergence_csv",
]

logger = logging.getLogger(__name__)

_ORTHONORMALITY_TOL = 1e-10


class FusionError(RuntimeError):
    """Numerical failure during fusion."""


class AdmmDivergenceError(FusionError):
    """ADMM produced a non-finite objective; carries the iteration trace."""

    def __init__(self, message: str, history: list["AdmmIteration"]):
        super().__init__(message)
        self.history = history


@dataclass(frozen=True)
class SubspaceModel:
    """PCA mean and orthonormal basis for pixel spectra (rows of ``basis``)."""

    mean: np.ndarray          # (n_bands,)
    basis: np.ndarray         # (n_components, n_bands), orthonormal rows
    eigenvalues: np.ndarray   # (n_components,) retained variances, descending
    explained_fraction: float

    def __post_init__(self) -> None:
        basis = np.atleast_2d(np.asarray(self.basis, dtype=np.float64))
        gram = basis @ basis.T
        if not np.allclose(gram, np.eye(basis.shape[0]), atol=_ORTHONORMALITY_TOL):
            raise ValueError("basis rows must be orthonormal")
        object.__setattr__(self, "basis", basis)
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "eigenvalues", np.asarray(self.eigenvalues, dtype=np.float64))

    @property
    def n_components(self) -> int:
        return self.basis.shape[0]

    @property
    def n_bands(self) -> int:
        return self.basis.shape[1]

    def project(self, spectra: np.ndarray) -> np.ndarray:
        """Subspace coefficients of (n, n_bands) spectra rows."""
        return (np.atleast_2d(spectra) - self.mean) @ self.basis.T

    def restore(self, coefficients: np.ndarray) -> np.ndarray:
        """Spectra rows from (n, n_components) coefficients."""
        return np.atleast_2d(coefficients) @ self.basis + self.mean


@dataclass(frozen=True)
class ReducedImage:
    """Subspace coefficients per pixel, rows in scanline order."""

    coefficients: np.ndarray  # (n_pixels, n_components)

    def __post_init__(self) -> None:
        coeff = np.atleast_2d(np.asarray(self.coefficients, dtype=np.float64))
        if not np.all(np.isfinite(coeff)):
            raise ValueError("reduced image must be finite")
        object.__setattr__(self, "coefficients", coeff)

    @property
    def n_pixels(self) -> int:
        return self.coefficients.shape[0]

    @property
    def n_components(self) -> int:
        return self.coefficients.shape[1]


@dataclass(frozen=True)
class FusionOperators:
    """Row-selection (L) and band-selection (B) operators plus noise weights."""

    row_indices: np.ndarray   # (n_sampled,) flattened pixel indices, position-list order
    band_indices: np.ndarray  # (n_selected,) indices into the wavenumber axis
    n_pixels: int
    n_bands: int
    sigma_h2: float           # white-noise variance of the point spectra
    sigma_m2: float           # white-noise variance of the band images

    def __post_init__(self) -> None:
        rows = np.asarray(self.row_indices, dtype=np.intp)
        bands = np.asarray(self.band_indices, dtype=np.intp)
        if rows.size != np.unique(rows).size:
            raise ValueError("row indices must be unique")
        if bands.size != np.unique(bands).size:
            raise ValueError("band indices must be unique")
        if rows.size and (rows.min() < 0 or rows.max() >= self.n_pixels):
            raise ValueError("row index out of range")
        if bands.size and (bands.min() < 0 or bands.max() >= self.n_bands):
            raise ValueError("band index out of range")
        if self.sigma_h2 <= 0 or self.sigma_m2 <= 0:
            raise ValueError("noise variances must be positive")
        object.__setattr__(self, "row_indices", rows)
        object.__setattr__(self, "band_indices", bands)

    def apply_rows(self, matrix: np.ndarray) -> np.ndarray:
        """L: keep the sampled-pixel rows, in position-list order."""
        return np.asarray(matrix)[self.row_indices]

    def apply_bands(self, spectra: np.ndarray) -> np.ndarray:
        """B: keep the selected band columns, in selection order."""
        return np.asarray(spectra)[:, self.band_indices]


@dataclass(frozen=True)
class SolverConfig:
    """Knobs of the fusion solver."""

    penalty: str = "l1"                    # "l1" or "nuclear"
    eta: float | None = None               # None: 1e-3 * rms of the initializer
    rho: float = 1.0
    max_iterations: int = 500
    tol_primal: float = 1e-6
    tol_dual: float = 1e-6
    adapt_rho: bool = True                 # residual balancing, x2 / /2 at ratio 10
    ridge: float = 1e-8
    n_components: int | None = None        # explicit subspace dimension...
    variance_fraction: float = 0.999       # ...or smallest dimension reaching this
    sigma_h2: float | None = None          # None: estimate from the point spectra
    sigma_m2: float | None = None

    def __post_init__(self) -> None:
        if self.penalty not in ("l1", "nuclear"):
            raise ValueError("penalty must be 'l1' or 'nuclear'")
        if self.eta is not None and self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.rho <= 0:
            raise ValueError("rho must be > 0")
        if self.tol_primal <= 0 or self.tol_dual <= 0:
            raise ValueError("tolerances must be > 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if self.ridge < 0:
            raise ValueError("ridge must be >= 0")
        if not 0 < self.variance_fraction <= 1:
            raise ValueError("variance_fraction must be in (0, 1]")

    @property
    def subspace_rule(self) -> int | float:
        return self.n_components if self.n_components is not None else self.variance_fraction


@dataclass(frozen=True)
class AdmmIteration:
    iteration: int
    objective: float
    primal_residual: float
    dual_residual: float
    rho: float


@dataclass(frozen=True)
class AdmmResult:
    reduced: ReducedImage
    n_iterations: int
    converged: bool
    history: tuple[AdmmIteration, ...]

    @property
    def primal_residual(self) -> float:
        return self.history[-1].primal_residual

    @property
    def dual_residual(self) -> float:
        return self.history[-1].dual_residual

    @property
    def objective(self) -> float:
        return self.history[-1].objective


@dataclass(frozen=True)
class FusionResult:
    cube: HyperCube
    model: SubspaceModel
    operators: FusionOperators
    initializer: ReducedImage
    admm: AdmmResult
    timings: dict[str, float] = field(default_factory=dict)


def fit_subspace(spectra: SpectrumSet, rule: int | float = 0.999) -> SubspaceModel:
    """PCA of the point spectra via eigendecomposition of the band covariance.

    ``rule`` is either an explicit component count or a variance fraction in
    (0, 1]; the component count is then the smallest one whose cumulative
    explained variance reaches the fraction. Components carry a deterministic
    sign: the entry of largest magnitude is positive.
    """
    X = spectra.spectra
    n, z = X.shape
    if n < 2:
        raise ValueError("need at least two spectra to fit a subspace")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = (Xc.T @ Xc) / (n - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    eigvals = np.clip(eigvals[::-1], 0.0, None)
    eigvecs = eigvecs[:, ::-1]

    max_dim = min(n, z)
    if isinstance(rule, (int, np.integer)):
        if not 1 <= rule <= max_dim:
            raise ValueError(f"explicit component count {rule} outside [1, {max_dim}]")
        n_comp = int(rule)
    else:
        fraction = float(rule)
        if not 0 < fraction <= 1:
            raise ValueError("variance fraction must be in (0, 1]")
        total = eigvals.sum()
        if total <= 0:
            n_comp = 1  # degenerate: zero variance, keep one (deterministic) component
        else:
            ratios = np.cumsum(eigvals) / total
            n_comp = int(np.searchsorted(ratios, fraction - 1e-12) + 1)
        n_comp = min(n_comp, max_dim)

    basis = eigvecs[:, :n_comp].T.copy()
    for row in basis:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    total = eigvals.sum()
    explained = float(eigvals[:n_comp].sum() / total) if total > 0 else 1.0
    return SubspaceModel(
        mean=mean, basis=basis, eigenvalues=eigvals[:n_comp], explained_fraction=explained
    )


def estimate_noise_variance(spectra: np.ndarray) -> float:
    """White-noise variance estimate from spectral second differences.

    Second differencing detrends the smooth absorbance structure; for white
    noise of variance s^2 the differences have variance 6 s^2, and a MAD
    estimator keeps residual peaks from inflating the result. Floored at a
    tiny fraction of the signal power so downstream weights stay finite on
    noise-free input.
    """
    X = np.atleast_2d(np.asarray(spectra, dtype=np.float64))
    power = float(np.mean(X**2))
    floor = max(power, 1e-300) * 1e-12
    if X.shape[1] < 3:
        return floor
    d = X[:, 2:] - 2.0 * X[:, 1:-1] + X[:, :-2]
    sigma = 1.4826 * float(np.median(np.abs(d))) / np.sqrt(6.0)
    return max(sigma * sigma, floor)


def build_operators(
    H: SpectrumSet,
    M: BandStack,
    sigma_h2: float | None = None,
    sigma_m2: float | None = None,
) -> FusionOperators:
    """Assemble L and B from the acquisition plan; estimate noise weights if unset."""
    n_pixels = M.height * M.width
    rows = H.flat_indices(M.width)
    if sigma_h2 is None or sigma_m2 is None:
        est = estimate_noise_variance(H.spectra)
        sigma_h2 = est if sigma_h2 is None else sigma_h2
        sigma_m2 = est if sigma_m2 is None else sigma_m2
    return FusionOperators(
        row_indices=rows,
        band_indices=np.asarray(M.band_indices, dtype=np.intp),
        n_pixels=n_pixels,
        n_bands=H.n_bands,
        sigma_h2=float(sigma_h2),
        sigma_m2=float(sigma_m2),
    )


def _centered_measurements(
    H: SpectrumSet, M: BandStack, model: SubspaceModel, ops: FusionOperators
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(A, H_centered, M_centered) with A = Q B the subspace-to-band map."""
    if H.n_bands != model.n_bands:
        raise ValueError("spectra band count does not match the subspace model")
    if M.height * M.width != ops.n_pixels:
        raise ValueError("band-image size does not match the operator pixel count")
    if tuple(M.band_indices) != tuple(ops.band_indices):
        raise ValueError("band stack and operators disagree on the selected bands")
    A = model.basis[:, ops.band_indices]
    h_c = H.spectra - model.mean
    m_c = M.unfold() - model.mean[ops.band_indices]
    return A, h_c, m_c


def map_initialize(
    H: SpectrumSet,
    M: BandStack,
    model: SubspaceModel,
    ops: FusionOperators,
    ridge: float = 1e-8,
) -> ReducedImage:
    """Per-pixel maximum-a-posteriori starting point for the solver.

    Every pixel gets the ridge-regularized least-squares fit of its band-image
    row to the subspace-to-band map (the conditional estimate given M).
    Pixels that also carry a point spectrum blend that prior, through its
    covariance, with the spectrum likelihood at weight 1/sigma_H^2. Only two
    small systems are factored, shared by all pixels of each kind.
    """
    A, h_c, m_c = _centered_measurements(H, M, model, ops)
    z = model.n_components
    w_h = 1.0 / ops.sigma_h2
    w_m = 1.0 / ops.sigma_m2

    gram = A @ A.T
    G_prior = gram + ridge * np.eye(z)
    if ridge == 0.0:
        eigmin = float(np.linalg.eigvalsh(G_prior).min())
        if eigmin <= 1e-12 * max(float(np.trace(G_prior)), 1.0):
            raise FusionError(
                "band-selection system is singular (fewer selected bands than "
                "subspace dimensions); pass a positive ridge"
            )
    G_sampled = w_m * G_prior + w_h * np.eye(z)

    rhs = m_c @ A.T
    coeff = np.linalg.solve(G_prior, rhs.T).T
    rows = ops.row_indices
    rhs_sampled = w_m * rhs[rows] + w_h * (h_c @ model.basis.T)
    coeff[rows] = np.linalg.solve(G_sampled, rhs_sampled.T).T
    return ReducedImage(coefficients=coeff)


def soft_threshold(x: np.ndarray, t: float) -> np.ndarray:
    """Elementwise shrinkage sign(x) * max(|x| - t, 0)."""
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


def _singular_value_threshold(x: np.ndarray, t: float) -> np.ndarray:
    u, s, vt = np.linalg.svd(x, full_matrices=False)
    return (u * np.maximum(s - t, 0.0)) @ vt


def _penalty_value(v: np.ndarray, penalty: str) -> float:
    if penalty == "l1":
        return float(np.abs(v).sum())
    return float(np.linalg.svd(v, compute_uv=False).sum())


def admm_solve(
    H: SpectrumSet,
    M: BandStack,
    model: SubspaceModel,
    ops: FusionOperators,
    config: SolverConfig = SolverConfig(),
    init: ReducedImage | None = None,
) -> AdmmResult:
    """Minimize the weighted-LASSO fusion objective by ADMM on the split V = R."""
    A, h_c, m_c = _centered_measurements(H, M, model, ops)
    z = model.n_components
    n_pixels = ops.n_pixels
    w_h = 1.0 / ops.sigma_h2
    w_m = 1.0 / ops.sigma_m2
    rows = ops.row_indices

    if init is None:
        init = map_initialize(H, M, model, ops, ridge=config.ridge)
    if init.coefficients.shape != (n_pixels, z):
        raise ValueError(
            f"initializer shape {init.coefficients.shape} != ({n_pixels}, {z})"
        )

    eta = config.eta
    if eta is None:
        eta = 1e-3 * float(np.sqrt(np.mean(init.coefficients**2)))

    gram = w_m * (A @ A.T) + config.ridge * np.eye(z)
    rho = config.rho

    def factorizations(rho_val: float):
        f_plain = cho_factor(gram + rho_val * np.eye(z))
        f_sampled = cho_factor(gram + (rho_val + w_h) * np.eye(z))
        return f_plain, f_sampled

    f_plain, f_sampled = factorizations(rho)

    rhs_m = w_m * (m_c @ A.T)             # constant part of the R-update rhs
    rhs_h = w_h * (h_c @ model.basis.T)   # extra term at sampled pixels

    def objective(r: np.ndarray, v: np.ndarray) -> float:
        res_h = h_c - r[rows] @ model.basis
        res_m = m_c - r @ A
        value = 0.5 * w_h * float(np.sum(res_h**2)) + 0.5 * w_m * float(np.sum(res_m**2))
        if eta > 0:
            value += eta * _penalty_value(v, config.penalty)
        return value

    R = init.coefficients.copy()
    V = R.copy()
    U = np.zeros_like(R)
    sqrt_size = np.sqrt(R.size)
    history: list[AdmmIteration] = []
    converged = False

    for it in range(1, config.max_iterations + 1):
        rhs = rho * (V - U) + rhs_m
        rhs[rows] += rhs_h
        R = cho_solve(f_plain, rhs.T).T
        R[rows] = cho_solve(f_sampled, rhs[rows].T).T

        V_old = V
        T = R + U
        if eta == 0:
            V = T.copy()
        elif config.penalty == "l1":
            V = soft_threshold(T, eta / rho)
        else:
            V = _singular_value_threshold(T, eta / rho)
        U = U + R - V

        r_norm = float(np.linalg.norm(R - V))
        s_norm = rho * float(np.linalg.norm(V - V_old))
        obj = objective(R, V)
        history.append(AdmmIteration(it, obj, r_norm, s_norm, rho))
        if not np.isfinite(obj):
            raise AdmmDivergenceError(
                f"objective became non-finite at iteration {it}", history
            )

        eps_pri = sqrt_size * config.tol_primal + config.tol_primal * max(
            float(np.linalg.norm(R)), float(np.linalg.norm(V))
        )
        eps_dual = sqrt_size * config.tol_dual + config.tol_dual * rho * float(
            np.linalg.norm(U)
        )
        if r_norm <= eps_pri and s_norm <= eps_dual:
            converged = True
            break

        if config.adapt_rho:
            if r_norm > 10.0 * s_norm:
                rho *= 2.0
                U = U / 2.0
                f_plain, f_sampled = factorizations(rho)
            elif s_norm > 10.0 * r_norm:
                rho /= 2.0
                U = U * 2.0
                f_plain, f_sampled = factorizations(rho)

    return AdmmResult(
        reduced=ReducedImage(coefficients=V if eta > 0 else R),
        n_iterations=len(history),
        converged=converged,
        history=tuple(history),
    )


def reconstruct_cube(
    reduced: ReducedImage,
    model: SubspaceModel,
    width: int,
    height: int,
    wavenumbers: np.ndarray,
) -> HyperCube:
    """Back-project coefficients to spectra and fold into an (x, y, band) cube."""
    if reduced.n_pixels != width * height:
        raise ValueError(
            f"{reduced.n_pixels} coefficient rows cannot fill a {width}x{height} image"
        )
    spectra = model.restore(reduced.coefficients)
    return HyperCube.from_unfolded(spectra, width, height, wavenumbers)


def run_fusion(
    H: SpectrumSet,
    M: BandStack,
    config: SolverConfig = SolverConfig(),
) -> FusionResult:
    """fit_subspace -> map_initialize -> admm_solve -> reconstruct_cube, with timings."""
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    model = fit_subspace(H, config.subspace_rule)
    timings["fit_subspace"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    ops = build_operators(H, M, sigma_h2=config.sigma_h2, sigma_m2=config.sigma_m2)
    init = map_initialize(H, M, model, ops, ridge=max(config.ridge, 1e-12))
    timings["map_initialize"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    admm = admm_solve(H, M, model, ops, config, init)
    timings["admm_solve"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    cube = reconstruct_cube(admm.reduced, model, M.width, M.height, H.wavenumbers)
    timings["reconstruct_cube"] = time.perf_counter() - t0

    logger.info(
        "fusion: %d components, %d ADMM iterations (converged=%s), "
        "primal %.3e dual %.3e, stages %s",
        model.n_components,
        admm.n_iterations,
        admm.converged,
        admm.primal_residual,
        admm.dual_residual,
        {k: round(v, 3) for k, v in timings.items()},
    )
    return FusionResult(
        cube=cube, model=model, operators=ops, initializer=init, admm=admm, timings=timings
    )


def fuse(H: SpectrumSet, M: BandStack, config: SolverConfig = SolverConfig()) -> HyperCube:
    """Reconstruct the full-resolution cube from the two measurement sets."""
    return run_fusion(H, M, config).cube


def write_convergence_csv(history, path) -> None:
    """Dump the per-iteration solver log (iteration, objective, residuals)."""
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "objective", "primal_residual", "dual_residual", "rho"])
        for rec in history:
            writer.writerow(
                [rec.iteration, f"{rec.objective:.12g}", f"{rec.primal_residual:.6g}",
                 f"{rec.dual_residual:.6g}", f"{rec.rho:.6g}"]
            )
