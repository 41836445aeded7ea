from .gradcheck import GradCheckError, grad_check
from .io import IntegrityError, decode_tensor, encode_tensor, load_tensor, save_tensor
from .tensor import *  # noqa: F401,F403
from .tensor import __all__ as _tensor_all

__all__ = list(_tensor_all) + [
    "grad_check", "GradCheckError", "IntegrityError",
    "encode_tensor", "decode_tensor", "save_tensor", "load_tensor",
]
