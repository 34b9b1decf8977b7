import math

import numpy as np


def standard_error(values):
    """Standard error of the mean of i.i.d. draws."""
    values = np.asarray(values, dtype=np.float64)
    if values.size < 2:
        return 0.0
    return float(np.std(values, ddof=1) / math.sqrt(values.size))


def log_mean_exp_stderr(log_weights):
    """Delta-method standard error of log(mean(exp(log_weights))).

    Weights are shifted by their maximum first, so the ratio std(w)/mean(w)
    stays finite for large exponents.
    """
    log_weights = np.asarray(log_weights, dtype=np.float64)
    n = log_weights.size
    if n < 2:
        return math.inf
    w = np.exp(log_weights - np.max(log_weights))
    return float(np.std(w, ddof=1) / (np.mean(w) * math.sqrt(n)))


def paired_difference_stderr(a, b):
    """Standard error of mean(a - b) for paired samples."""
    return standard_error(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))


def mean_std_cv(values):
    """Mean, sample standard deviation and coefficient of variation across seeds."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return {"mean": math.nan, "std": math.nan, "cv": math.nan, "n": 0}
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if values.size > 1 else 0.0
    cv = std / abs(mean) if mean != 0.0 else math.nan
    return {"mean": mean, "std": std, "cv": cv, "n": int(values.size)}


def samples_for_precision(per_sample_std, target_se):
    """Monte Carlo sample count needed for the standard error to reach target_se."""
    if target_se <= 0:
        raise ValueError("target_se must be positive")
    if per_sample_std <= 0:
        return 1
    return int(math.ceil((per_sample_std / target_se) ** 2))
