"""
progq - progressive residual quantization for compact multi-length codes

One trained model yields codes of L lengths at once: the first l layers of
every code are themselves a valid l-layer code, searched with asymmetric
table lookups against unquantized queries.
"""

__version__ = "1.0.0"
__description__ = "Supervised progressive quantization: training, encoding and search of multi-length codes"

from .core import Codebook, PackedCode, pack_code, unpack_code
from .errors import ProgQError
from .index import EncodedDatabase, decode, encode_database
from .model import Hyperparameters, ProgressiveModel
from .search import SearchIndex, topk
from .trainer import train

__all__ = [
    "Codebook",
    "EncodedDatabase",
    "Hyperparameters",
    "PackedCode",
    "ProgQError",
    "ProgressiveModel",
    "SearchIndex",
    "decode",
    "encode_database",
    "pack_code",
    "topk",
    "train",
    "unpack_code",
]
