"""Wide attention EfficientNet: a numpy autodiff engine, the WATT-EffNet-d-k
model family, training utilities and a command line front end."""

from .errors import (CalibrationError, CheckpointError, ConfigurationError, ContractError, DecodeError,
                     DimensionMismatchError, IngestionError, InvalidInputError, NumericError, SplitError,
                     WattError)
from .model import ArchConfig, ArchPolicy, WattEffNet, build, count_flops, count_params, describe
from .tensor import Tensor, no_grad, tensor

__version__ = "0.1.0"
