"""Entropy coding and the compressed container."""

from .bitstream import (
    Bitstream,
    BitstreamError,
    CompressionReport,
    DecodedShape,
    HeaderError,
    IntegrityError,
    OffsetError,
    TruncatedBitstreamError,
    compress_set,
    decode_bitstream,
    decode_shapes,
    decompress_set,
    encode_bitstream,
    from_levels,
    to_levels,
)
from .huffman import (
    HuffmanError,
    HuffmanTable,
    InvalidCodeError,
    TruncatedPayloadError,
    histogram,
    huffman_build,
    huffman_decode,
    huffman_encode,
)
