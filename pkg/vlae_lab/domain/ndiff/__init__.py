from vlae_lab.domain.ndiff.gradcheck import grad_check, jacobian
from vlae_lab.domain.ndiff.ops import ElementwiseKind, ReduceKind, conv2d, elementwise, matmul, reduce
from vlae_lab.domain.ndiff.tensor import Parameter, Tape, Tensor, backward, constant, variable

__all__ = [
    "ElementwiseKind",
    "Parameter",
    "ReduceKind",
    "Tape",
    "Tensor",
    "backward",
    "constant",
    "conv2d",
    "elementwise",
    "grad_check",
    "jacobian",
    "matmul",
    "reduce",
    "variable",
]
