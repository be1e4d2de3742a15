"""Mean-velocity flow matching at desk scale.

A small generative-modeling engine: a from-scratch autodiff core with
forward (JVP) and reverse modes, a toy flow transformer, the guided
mean-velocity training objective with a two-stage curriculum, few-step
sampling, synthetic conditional datasets with closed-form velocity oracles,
and a distribution-metric evaluation harness with a CLI front end.
"""

__version__ = "0.1.0"

from .autodiff import (
    DualTensor,
    GradSet,
    NonFiniteError,
    ParamSet,
    Tensor,
    backward,
    finite_diff_jvp,
    jvp,
    stop_gradient,
    value_and_grad,
)

__all__ = [
    "__version__",
    "Tensor",
    "DualTensor",
    "ParamSet",
    "GradSet",
    "NonFiniteError",
    "jvp",
    "finite_diff_jvp",
    "backward",
    "value_and_grad",
    "stop_gradient",
]
