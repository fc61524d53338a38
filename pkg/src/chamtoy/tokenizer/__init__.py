"""Mixed-modal tokenization: byte-level BPE for text, a vector-quantizing
patch codebook for images, and the shared vocabulary that interleaves them.
"""

from .bpe import BPETokenizer, train_bpe
from .codebook import (
    Codebook,
    decode_tokens,
    encode_image,
    extract_patches,
    train_codebook,
)
from .pixmap import read_pixmap, write_pixmap
from .vocab import MixedVocab, TokenKind

__all__ = [
    "BPETokenizer",
    "train_bpe",
    "Codebook",
    "train_codebook",
    "encode_image",
    "decode_tokens",
    "extract_patches",
    "read_pixmap",
    "write_pixmap",
    "MixedVocab",
    "TokenKind",
]
