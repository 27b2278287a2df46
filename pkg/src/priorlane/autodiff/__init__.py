from . import functional
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import check_gradients, relative_error
from .nn import Conv2d, LayerNorm, Linear, Module
from .optim import SGD, Adam, OptimizerState
from .tensor import Tensor, as_tensor, concat, matmul, max_over, no_grad, stack

__all__ = [
    "Tensor", "as_tensor", "concat", "matmul", "max_over", "no_grad", "stack",
    "functional", "Module", "Linear", "LayerNorm", "Conv2d",
    "SGD", "Adam", "OptimizerState", "save_checkpoint", "load_checkpoint",
    "check_gradients", "relative_error",
]
