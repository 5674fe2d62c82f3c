"""
Real-to-sim calibration: Gaussian process regression from surrogate wavelengths to simulated base moments.
"""
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgError, cho_factor, cho_solve
from scipy.spatial.distance import cdist, pdist

from exceptions import CalibrationError, ValidationError
from sensor_surrogate import CalibrationPair

logger = logging.getLogger(__name__)

DEFAULT_JITTER = 1e-10


@dataclass(frozen=True)
class PreprocessConfig:
    smoothing_window: int = 3
    activity_threshold: float = 2.0

    def validate(self) -> None:
        if self.smoothing_window < 1:
            raise ValidationError(f"smoothing_window must be >= 1, got {self.smoothing_window}")
        if self.activity_threshold < 0:
            raise ValidationError(f"activity_threshold must be >= 0, got {self.activity_threshold}")


@dataclass(frozen=True)
class CalibrationConfig:
    """Kernel radius and noise default to 2x the input span and the surrogate noise variance."""

    kernel_radius: Optional[float] = None
    noise_variance: Optional[float] = None
    jitter: float = DEFAULT_JITTER
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)


def tp_kernel(r, R: float):
    """
    Thin-plate covariance k(r) = (2|r|³ - 3R r² + R³) / 12.

    Distances beyond R are outside the modelled region and clamp to 0.
    """
    if not R > 0:
        raise ValidationError(f"Kernel radius must be positive, got {R}")
    r = np.abs(np.asarray(r, dtype=float))
    outside = r > R
    if np.any(outside):
        logger.warning(f"{int(np.sum(outside))} distance(s) exceed kernel radius {R:.4g}; clamped to 0")
    k = (2.0 * r ** 3 - 3.0 * R * r ** 2 + R ** 3) / 12.0
    k = np.where(outside, 0.0, k)
    return float(k) if k.ndim == 0 else k


@dataclass(frozen=True, eq=False)
class GPRModel:
    """Single-output GP with the thin-plate kernel, factorized at construction."""

    train_inputs: np.ndarray
    train_targets: np.ndarray
    kernel_radius: float
    noise_variance: float
    alpha: np.ndarray
    jitter: float = DEFAULT_JITTER
    _factor: Tuple[np.ndarray, bool] = field(default=None, repr=False)

    def __post_init__(self):
        if self._factor is None:
            object.__setattr__(self, "_factor", _factorize(self.train_inputs, self.kernel_radius,
                                                           self.noise_variance, self.jitter))

    def prior_variance(self) -> float:
        return self.kernel_radius ** 3 / 12.0


def _gram(inputs: np.ndarray, R: float) -> np.ndarray:
    return tp_kernel(cdist(inputs, inputs), R)


def _factorize(inputs: np.ndarray, R: float, noise: float, jitter: float):
    K = _gram(inputs, R)
    K[np.diag_indices_from(K)] += noise + jitter
    try:
        return cho_factor(K, lower=True)
    except LinAlgError as e:
        raise CalibrationError(
            f"Gram matrix is not positive definite: {e}",
            {"n_inputs": len(inputs), "kernel_radius": R, "noise_variance": noise, "jitter": jitter},
        ) from e


def fit_channel(inputs: np.ndarray, targets: np.ndarray, kernel_radius: Optional[float] = None,
                noise_variance: float = 0.0, jitter: float = DEFAULT_JITTER) -> GPRModel:
    """
    Fit one output channel: alpha = (K + noise I)^-1 y by Cholesky.

    Args:
        inputs: (n, d) training inputs (pm).
        targets: (n,) training targets (N·mm).
        kernel_radius: R; defaults to twice the largest pairwise input distance.
        noise_variance: Observation noise (pm²).
        jitter: Diagonal conditioning term.

    Returns:
        Fitted GPRModel.

    Raises:
        CalibrationError: Too few or duplicate inputs, or a failed factorization.
    """
    x = np.asarray(inputs, dtype=float)
    y = np.asarray(targets, dtype=float)
    config = {"n_inputs": len(x), "kernel_radius": kernel_radius, "noise_variance": noise_variance}
    if x.ndim != 2 or len(x) < 3 or len(y) != len(x):
        raise CalibrationError("GPR needs at least 3 (input, target) pairs", config)
    distances = pdist(x)
    if noise_variance == 0 and np.min(distances) < 1e-12:
        raise CalibrationError("Duplicate training inputs make the noise-free Gram matrix singular", config)
    span = float(np.max(distances))
    R = 2.0 * span if kernel_radius is None else float(kernel_radius)
    if R <= span:
        raise CalibrationError(f"Kernel radius {R:.4g} must exceed the largest input distance {span:.4g}", config)

    factor = _factorize(x, R, noise_variance, jitter)
    alpha = cho_solve(factor, y)
    # one refinement step against the unjittered system
    K = _gram(x, R)
    K[np.diag_indices_from(K)] += noise_variance
    alpha = alpha + cho_solve(factor, y - K @ alpha)
    return GPRModel(x, y, R, float(noise_variance), alpha, jitter, factor)


def predict(model: GPRModel, wavelength) -> Tuple[np.ndarray, np.ndarray]:
    """
    Posterior mean and variance at one (d,) or many (m, d) query points.

    Returns:
        (mean, variance), scalars for a single query.
    """
    q = np.atleast_2d(np.asarray(wavelength, dtype=float))
    k_star = tp_kernel(cdist(q, model.train_inputs), model.kernel_radius)
    mean = k_star @ model.alpha
    v = cho_solve(model._factor, k_star.T)
    var = np.maximum(model.prior_variance() - np.sum(k_star.T * v, axis=0), 0.0)
    if np.ndim(wavelength) == 1:
        return float(mean[0]), float(var[0])
    return mean, var


@dataclass(frozen=True, eq=False)
class MomentCalibration:
    """One GPR per moment channel plus the preprocessing applied to raw readings."""

    channels: Tuple[GPRModel, ...]
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)

    @property
    def n_pairs(self) -> int:
        return len(self.channels[0].train_inputs)

    def predict(self, wavelengths) -> Tuple[np.ndarray, np.ndarray]:
        """Moment means and variances for (2,) or (m, 2) wavelengths."""
        results = [predict(model, wavelengths) for model in self.channels]
        mean = np.stack([np.asarray(r[0]) for r in results], axis=-1)
        var = np.stack([np.asarray(r[1]) for r in results], axis=-1)
        return mean, var

    def moments_from_series(self, wavelengths: np.ndarray) -> np.ndarray:
        """Map a preprocessed series to moments; zeroed (inactive) rows map to zero moment."""
        w = np.asarray(wavelengths, dtype=float).reshape(-1, 2)
        out = np.zeros_like(w)
        active = np.any(w != 0.0, axis=1)
        if np.any(active):
            out[active] = self.predict(w[active])[0]
        return out


def fit(pairs: Sequence[CalibrationPair], kernel_radius: Optional[float] = None, noise_variance: float = 0.0,
        jitter: float = DEFAULT_JITTER, preprocess_config: Optional[PreprocessConfig] = None) -> MomentCalibration:
    """Fit independent per-channel GPRs on rig pairs (wavelength -> moment)."""
    if len(pairs) < 3:
        raise CalibrationError("GPR needs at least 3 calibration pairs", {"n_pairs": len(pairs)})
    inputs = np.array([p.wavelength for p in pairs], dtype=float)
    targets = np.array([p.moment for p in pairs], dtype=float)
    channels = tuple(
        fit_channel(inputs, targets[:, c], kernel_radius, noise_variance, jitter) for c in range(targets.shape[1])
    )
    logger.info(f"Fitted {len(channels)}-channel GPR on {len(pairs)} pairs (R={channels[0].kernel_radius:.4g} pm)")
    return MomentCalibration(channels, preprocess_config or PreprocessConfig())


def preprocess(raw: np.ndarray, cfg: PreprocessConfig) -> np.ndarray:
    """
    Causal moving average over `smoothing_window` samples, then zero every
    sample whose wavelength norm falls below `activity_threshold`.
    """
    cfg.validate()
    frame = pd.DataFrame(np.asarray(raw, dtype=float).reshape(-1, 2))
    smoothed = frame.rolling(window=cfg.smoothing_window, min_periods=1).mean().to_numpy()
    inactive = np.linalg.norm(smoothed, axis=1) < cfg.activity_threshold
    smoothed[inactive] = 0.0
    return smoothed
