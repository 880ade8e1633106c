"""Multivariate autoregressive air-quality forecasting on a small numpy autodiff core."""

__version__ = "0.1.0"

from .model import HyperParams, init_params, predict_step  # noqa: E402
from .scheduler import greedy_plan, invocation_profile  # noqa: E402
from .training import TrainConfig, make_sw_weights, sw_loss, train  # noqa: E402

__all__ = [
    "HyperParams", "init_params", "predict_step", "greedy_plan", "invocation_profile",
    "TrainConfig", "make_sw_weights", "sw_loss", "train", "__version__",
]
