"""Support-recovery and reconstruction metrics."""
import numpy as np

from ..errors import ParameterError, UndefinedMetricError


def sens_spec(true_support, declared_support, p):
    """Sensitivity ``TP/(TP+FN)`` and specificity ``TN/(TN+FP)`` over ``p`` subjects.

    An empty true support has sensitivity 1; a full one has specificity 1.
    """
    t = set(int(j) for j in true_support)
    d = set(int(j) for j in declared_support)
    if any(j < 0 or j >= p for j in t | d):
        raise ParameterError("support indices must lie in [0, p)")
    tp = len(t & d)
    fn = len(t - d)
    fp = len(d - t)
    tn = p - tp - fn - fp
    sens = 1.0 if not t else tp / (tp + fn)
    spec = 1.0 if len(t) == p else tn / (tn + fp)
    return sens, spec


def rrmse(beta_true, beta_hat):
    """Relative error ``||b* - b||_2 / ||b*||_2``."""
    b = np.asarray(beta_true, dtype=float)
    norm = np.linalg.norm(b)
    if norm == 0:
        raise UndefinedMetricError("relative error of a zero signal is undefined")
    return float(np.linalg.norm(b - np.asarray(beta_hat, dtype=float)) / norm)
