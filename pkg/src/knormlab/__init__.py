"""Kernel-normalized CNNs, DP-SGD and FedAvg on a small numpy autodiff engine."""

from .architectures import build_knresnet13, build_resnet8, build_vgg6, describe
from .autodiff import GradTape, Parameter, Tensor
from .errors import ConfigError, ContractError, DimensionError, IngestionError, KnormlabError, PrivacyBudgetExhausted
from .rng import Rng

__version__ = "0.1.0"
