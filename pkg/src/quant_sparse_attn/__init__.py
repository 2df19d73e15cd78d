"""Dynamic sparse attention with low-precision estimation and a pipelined schedule."""

from quant_sparse_attn.tensor_core import (
    QuantizedTensor,
    Tensor,
    TensorFormatError,
    ValidationError,
    dequantize,
    quantize,
    read_tensor,
    write_tensor,
)

__all__ = [
    "QuantizedTensor",
    "Tensor",
    "TensorFormatError",
    "ValidationError",
    "dequantize",
    "quantize",
    "read_tensor",
    "write_tensor",
]
__version__ = "0.1.0"
