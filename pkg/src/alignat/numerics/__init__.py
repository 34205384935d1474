from .tensor import (
    Array,
    Tensor,
    add,
    concat_cols,
    constant,
    gather_rows,
    log_row_softmax,
    masked_fill,
    matmul,
    mean_all,
    mul,
    parameter,
    relu,
    row_softmax,
    slice_cols,
    slice_rows,
    sum_all,
    transpose,
)
from .ops import (
    MASK_MODES,
    NEG_FILL,
    AttentionMask,
    MhaParams,
    conv2d,
    conv_frames,
    cross_entropy_label_smoothed,
    dropout,
    embedding_lookup,
    feed_forward,
    layer_norm,
    masked_attention,
    multi_head_attention,
    sinusoidal_positional_encoding,
)
from .checkpoint import MAGIC, load_checkpoint, save_checkpoint
from .gradcheck import finite_difference_check

__all__ = [
    "Array",
    "Tensor",
    "add",
    "concat_cols",
    "constant",
    "gather_rows",
    "log_row_softmax",
    "masked_fill",
    "matmul",
    "mean_all",
    "mul",
    "parameter",
    "relu",
    "row_softmax",
    "slice_cols",
    "slice_rows",
    "sum_all",
    "transpose",
    "MASK_MODES",
    "NEG_FILL",
    "AttentionMask",
    "MhaParams",
    "conv2d",
    "conv_frames",
    "cross_entropy_label_smoothed",
    "dropout",
    "embedding_lookup",
    "feed_forward",
    "layer_norm",
    "masked_attention",
    "multi_head_attention",
    "sinusoidal_positional_encoding",
    "MAGIC",
    "load_checkpoint",
    "save_checkpoint",
    "finite_difference_check",
]
