"""Ready-made designs and parameter values used by the simulation study, tests and CLI examples."""
from __future__ import annotations

from .design import MtmmDesign
from .families import CensoredGaussian
from .params import ParameterSet

# (tau, lambda, gamma, sigma) per variable, method-major order: y11 y21 y31 y12 y22 y32
_MEASUREMENT = {
    (1, 1): (1.296, 3.772, -1.025, 0.175),
    (2, 1): (0.693, 1.546, 0.043, 0.420),
    (3, 1): (0.366, -0.283, 0.001, 0.003),
    (1, 2): (4.811, 2.029, -3.169, 0.545),
    (2, 2): (1.017, 1.964, -0.224, 0.141),
    (3, 2): (0.384, -0.114, -0.006, 0.015),
}

_LATENT = {
    "alpha[1,1]": 0.889, "alpha[1,2]": 0.085,
    "alpha[2,1]": 1.426, "alpha[2,2]": -0.305,
    "alpha[3,1]": -0.121, "alpha[3,2]": -0.356,
    "kappa[1,1]": 0.058, "kappa[2,1]": -0.888,
    "phi[1,2]": 2.916, "phi[1,3]": -0.992, "phi[2,3]": -0.289,
}


def linked_income_design(n_components: int = 1, trait_categories: int = 3) -> MtmmDesign:
    """Three censored traits measured by two methods, three trait and two method classes."""
    return MtmmDesign.crossed(3, 2, CensoredGaussian(0.0), trait_categories=trait_categories,
                              method_categories=2, n_components=n_components)


def linked_income_truth() -> ParameterSet:
    """Generating values of the three-trait, two-method censored simulation model."""
    design = linked_income_design()
    values = dict(_LATENT)
    for (t, m), (tau, lam, gam, sig) in _MEASUREMENT.items():
        key = f"{t},{m}"
        values.update({f"tau[{key}]": tau, f"lambda[{key}]": lam,
                       f"gamma[{key}]": gam, f"sigma[{key}]": sig})
    return ParameterSet.from_dict(design, values)


# Published |bias| at n = 2000 for the generating model above, used as an acceptance reference.
LINKED_INCOME_BIAS_2000 = {
    "alpha[1,1]": -0.002, "alpha[1,2]": 0.004, "alpha[2,1]": 0.013, "alpha[2,2]": -0.006,
    "alpha[3,1]": -0.002, "alpha[3,2]": 0.006, "kappa[1,1]": 0.001, "kappa[2,1]": -0.005,
    "tau[1,1]": -0.001, "lambda[1,1]": 0.007, "gamma[1,1]": -0.002,
    "tau[2,1]": 0.003, "lambda[2,1]": 0.002, "gamma[2,1]": -0.003,
    "tau[3,1]": -0.000, "lambda[3,1]": 0.000, "gamma[3,1]": -0.000,
    "tau[1,2]": 0.004, "lambda[1,2]": -0.003, "gamma[1,2]": -0.002,
    "tau[2,2]": 0.002, "lambda[2,2]": 0.002, "gamma[2,2]": -0.000,
    "tau[3,2]": 0.001, "lambda[3,2]": -0.001, "gamma[3,2]": -0.001,
    "phi[1,2]": 0.009, "phi[1,3]": -0.000, "phi[2,3]": 0.012,
    "sigma[1,1]": -0.001, "sigma[2,1]": -0.003, "sigma[3,1]": -0.000,
    "sigma[1,2]": -0.002, "sigma[2,2]": 0.000, "sigma[3,2]": -0.000,
}


# Random-response component: marginal location and spread, no trait or method signal.
_RANDOM_RESPONSE = {
    (1, 1): (2.0, 2.0), (2, 1): (1.2, 1.2), (3, 1): (0.3, 0.3),
    (1, 2): (3.0, 2.5), (2, 2): (1.5, 1.2), (3, 2): (0.3, 0.3),
}


def heterogeneous_income_truth(random_share: float = 0.1) -> ParameterSet:
    """Two-component version of the censored model: a share of units answer
    from a random-response process unrelated to their traits."""
    import numpy as np
    design = linked_income_design(n_components=2)
    base = linked_income_truth().as_dict()
    values = {k: v for k, v in base.items() if not k.startswith(("tau", "lambda", "gamma", "sigma"))}
    values["logit[2]"] = float(np.log(random_share / (1.0 - random_share)))
    for (t, m), (tau, lam, gam, sig) in _MEASUREMENT.items():
        key = f"{t},{m}"
        values.update({f"tau[{key}|1]": tau, f"lambda[{key}|1]": lam,
                       f"gamma[{key}|1]": gam, f"sigma[{key}|1]": sig})
        mu, sd = _RANDOM_RESPONSE[(t, m)]
        values.update({f"tau[{key}|2]": mu, f"sigma[{key}|2]": sd})
    return ParameterSet.from_dict(design, values)


def selection_design(trait_categories: int = 3, n_components: int = 2) -> MtmmDesign:
    """Three gaussian traits, a survey method with two classes and a register
    without method variation, used for model-selection experiments."""
    from .families import Gaussian
    return MtmmDesign.crossed(3, 2, Gaussian(), trait_categories=trait_categories,
                              method_categories=(2, 1), n_components=n_components)


def selection_truth(random_share: float = 0.1) -> ParameterSet:
    """K = 3, |S| = 2 generating values: well separated trait classes plus a
    random-response component holding ``random_share`` of the units."""
    import numpy as np
    design = selection_design()
    values = {"alpha[1,1]": 0.3, "alpha[1,2]": 0.0, "alpha[2,1]": 0.0, "alpha[2,2]": 0.3,
              "alpha[3,1]": -0.2, "alpha[3,2]": 0.2, "kappa[1,1]": 0.0,
              "phi[1,2]": 1.5, "phi[1,3]": 1.0, "phi[2,3]": 0.5,
              "logit[2]": float(np.log(random_share / (1.0 - random_share)))}
    for m in (1, 2):
        for t in (1, 2, 3):
            key = f"{t},{m}"
            values.update({f"tau[{key}|1]": 0.2 * t, f"lambda[{key}|1]": 2.0 + 0.5 * (m - 1),
                           f"gamma[{key}|1]": 0.8 if m == 1 else 0.0, f"sigma[{key}|1]": 0.4,
                           f"tau[{key}|2]": 1.5, f"sigma[{key}|2]": 1.5})
    return ParameterSet.from_dict(design, values)
