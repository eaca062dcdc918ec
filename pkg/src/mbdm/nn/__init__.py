from mbdm.nn.adam import AdamState, adam_step
from mbdm.nn.autograd import Tensor, silu
from mbdm.nn.mlp import MlpParams, init_mlp, loss_and_grad, mlp_forward, sinusoidal_embed

__all__ = ["AdamState", "MlpParams", "Tensor", "adam_step", "init_mlp", "loss_and_grad",
           "mlp_forward", "silu", "sinusoidal_embed"]
