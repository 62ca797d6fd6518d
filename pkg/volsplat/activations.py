"""θ activations: sigmoid (3DGS opacity) and softplus with β = 2 (extinction)."""

import numpy as np
from scipy.special import expit, logit

from volsplat.exceptions import ConfigurationError
from volsplat.models import ThetaActivation

SOFTPLUS_BETA = 2.0


def activate_theta(raw, kind: ThetaActivation):
    kind = ThetaActivation(kind)
    raw = np.asarray(raw, dtype=np.float64)
    if kind is ThetaActivation.SIGMOID:
        return expit(raw)
    return np.logaddexp(0.0, SOFTPLUS_BETA * raw) / SOFTPLUS_BETA


def activation_derivative(raw, kind: ThetaActivation):
    """dθ/draw."""
    kind = ThetaActivation(kind)
    raw = np.asarray(raw, dtype=np.float64)
    if kind is ThetaActivation.SIGMOID:
        s = expit(raw)
        return s * (1.0 - s)
    return expit(SOFTPLUS_BETA * raw)


def inverse_activation(theta, kind: ThetaActivation):
    kind = ThetaActivation(kind)
    theta = np.asarray(theta, dtype=np.float64)
    if kind is ThetaActivation.SIGMOID:
        if np.any((theta <= 0.0) | (theta >= 1.0)):
            raise ConfigurationError(
                f"Sigmoid inverse is undefined for θ outside (0, 1): {theta.min()}..{theta.max()}"
            )
        return logit(theta)
    if np.any(theta <= 0.0):
        raise ConfigurationError("Softplus inverse is undefined for θ <= 0")
    # softplus⁻¹(y) = y + log(1 − e^{−βy}) / β, stable for small and large y
    return theta + np.log(-np.expm1(-SOFTPLUS_BETA * theta)) / SOFTPLUS_BETA
