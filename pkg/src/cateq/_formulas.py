"""Per-sample formulas shared by the learners and the Q statistic."""

import numpy as np

from .errors import ConfigError


def check_propensity(e) -> np.ndarray:
    e = np.asarray(e, dtype=float)
    if not ((e > 0) & (e < 1)).all():
        raise ConfigError("propensity values must lie strictly inside (0, 1)")
    return e


def ht_transform(t, y, e):
    """Horvitz-Thompson transformed outcome ``(t/e - (1-t)/(1-e)) * y``.

    Its conditional mean given x is the treatment effect when ``e`` is the
    true propensity. Works elementwise; scalars in, scalar out.
    """
    e = check_propensity(e)
    t = np.asarray(t, dtype=float)
    out = (t / e - (1.0 - t) / (1.0 - e)) * np.asarray(y, dtype=float)
    return float(out) if out.ndim == 0 else out


def dr_gamma(t, e, mu0, mu1):
    """Plug-in correction turning ``eta`` into the doubly robust pseudo-outcome."""
    e = check_propensity(e)
    t = np.asarray(t, dtype=float)
    out = (1.0 - t / e) * np.asarray(mu1, dtype=float) - (1.0 - (1.0 - t) / (1.0 - e)) * np.asarray(
        mu0, dtype=float
    )
    return float(out) if out.ndim == 0 else out


def q_sample(tau_hat, eta):
    """Per-sample statistic ``tau_hat**2 - 2 * tau_hat * eta``."""
    tau_hat = np.asarray(tau_hat, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if not (np.isfinite(tau_hat).all() and np.isfinite(eta).all()):
        raise ConfigError("q_sample needs finite inputs")
    out = tau_hat * tau_hat - 2.0 * tau_hat * eta
    return float(out) if out.ndim == 0 else out
