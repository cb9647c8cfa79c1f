"""Compact neural representation: the quantized auto-decoder and its training."""

from .decoder import DecoderArch, DecoderParams, UpModule, decode_tensor, decoder_backward, decoder_forward
from .loss import TrainConfig, regression_loss, surface_mask
from .train import (
    StateFileError,
    TrainState,
    fit_new_feature,
    init_state,
    load_state,
    save_state,
    train_set,
)
from .qdeepsdf import (
    QDeepSdfArch,
    QDeepSdfParams,
    QDeepSdfState,
    qdeepsdf_backward,
    qdeepsdf_compressed_bytes,
    qdeepsdf_decode,
    qdeepsdf_forward,
    train_qdeepsdf,
)
