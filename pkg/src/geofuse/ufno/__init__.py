"""U-FNO surrogate: spectral layers, hand-written gradients and training."""
from .network import (UfnoConfig, UfnoParams, backward, forward, fourier_layer, init_params, input_tensor,
                      layer_names, layer_shapes, loss, loss_grad, u_fourier_layer, unet_block, zero_params)
from .spectral import irfft3, rfft3, spectral_conv
from .surrogate import (QUANTITIES, Surrogate, UFNORegressor, activation_pattern, gradient_check, stack_dataset,
                        surrogate_outputs, train)
from .train import Normalizer, TrainConfig, adam_init, adam_step, fit_normalizer, train_arrays

__all__ = [
    "UfnoConfig", "UfnoParams", "backward", "forward", "fourier_layer", "init_params", "input_tensor",
    "layer_names", "layer_shapes", "loss", "loss_grad", "u_fourier_layer", "unet_block", "zero_params",
    "irfft3", "rfft3", "spectral_conv", "QUANTITIES", "Surrogate", "UFNORegressor", "activation_pattern",
    "gradient_check", "stack_dataset", "surrogate_outputs", "train", "Normalizer", "TrainConfig",
    "adam_init", "adam_step", "fit_normalizer", "train_arrays",
]
