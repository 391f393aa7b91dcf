"""Desk-scale LE-to-DES translator: autodiff, network, optimizer, training."""

from .optim import AdamState, adam_step, init_adam
from .serialize import FORMAT_VERSION, load_model, save_model
from .train import TrainConfig, infer_translator, train_end2end, train_translator
from .unet import UNetConfig, UNetParams, init_params, loss_and_grads, unet_forward

__all__ = [
    "AdamState",
    "adam_step",
    "init_adam",
    "FORMAT_VERSION",
    "load_model",
    "save_model",
    "TrainConfig",
    "infer_translator",
    "train_end2end",
    "train_translator",
    "UNetConfig",
    "UNetParams",
    "init_params",
    "loss_and_grads",
    "unet_forward",
]
