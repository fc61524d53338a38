"""Early-fusion mixed-modal transformer, desk scale.

Text and images share one token sequence: text is byte-level BPE, images
are quantized to codebook indices, and a single decoder-only transformer
is trained over the interleaved stream.
"""

__version__ = "0.1.0"
