"""Reference forecasters scored on the same windows as the network."""
import logging

import numpy as np

from errors import EmptyTestSet, SingularNormalEquations
from training import ForecastReport, WindowSet, build_report

logger = logging.getLogger(__name__)

AR_ORDER = 5


def persistence_forecast(history: np.ndarray, horizon: int) -> np.ndarray:
    return np.full(horizon, float(history[-1]))


def fit_autoregression(history: np.ndarray, order: int = AR_ORDER) -> np.ndarray:
    """Least-squares AR(order) with intercept; returns [intercept, a_1, ..., a_order].

    Uses the SVD minimum-norm solution, so rank-deficient but consistent
    histories (constants, ramps) still fit exactly.
    """
    y = np.asarray(history, dtype=np.float64)
    if y.shape[0] < order + 2:
        raise SingularNormalEquations(f"AR({order}) needs at least {order + 2} points, got {y.shape[0]}")
    rows = y.shape[0] - order
    design = np.ones((rows, order + 1))
    for lag in range(1, order + 1):
        design[:, lag] = y[order - lag : order - lag + rows]
    try:
        coefficients, *_ = np.linalg.lstsq(design, y[order:], rcond=None)
    except np.linalg.LinAlgError as e:
        raise SingularNormalEquations(f"AR({order}) least squares did not converge: {e}") from e
    if not np.all(np.isfinite(coefficients)):
        raise SingularNormalEquations(f"AR({order}) fit produced non-finite coefficients")
    return coefficients


def forecast_autoregression(history: np.ndarray, coefficients: np.ndarray, horizon: int) -> np.ndarray:
    order = coefficients.shape[0] - 1
    buffer = list(np.asarray(history, dtype=np.float64)[-order:])
    out = []
    for _ in range(horizon):
        lags = buffer[::-1][:order]
        value = coefficients[0] + float(np.dot(coefficients[1:], lags))
        out.append(value)
        buffer.append(value)
    return np.asarray(out)


def baseline_persistence(windows: WindowSet, subject_id: str = "subject", **extra) -> ForecastReport:
    if len(windows) == 0:
        raise EmptyTestSet(f"{subject_id}: no windows for the persistence baseline")
    prediction = np.stack([persistence_forecast(h, windows.horizon) for h in windows.history])
    return build_report(subject_id, windows.targets, prediction, model="persistence", **extra)


def baseline_linear(windows: WindowSet, subject_id: str = "subject", order: int = AR_ORDER,
                    **extra) -> ForecastReport:
    if len(windows) == 0:
        raise EmptyTestSet(f"{subject_id}: no windows for the linear baseline")
    predictions, fallbacks = [], 0
    for history in windows.history:
        try:
            coefficients = fit_autoregression(history, order)
            predictions.append(forecast_autoregression(history, coefficients, windows.horizon))
        except SingularNormalEquations as e:
            fallbacks += 1
            logger.debug(f"{subject_id}: {e}")
            predictions.append(persistence_forecast(history, windows.horizon))
    if fallbacks:
        logger.warning(f"{subject_id}: AR({order}) fit failed on {fallbacks} window(s), used persistence instead")
    return build_report(subject_id, windows.targets, np.stack(predictions), model="linear",
                        fallbacks=fallbacks, **extra)
