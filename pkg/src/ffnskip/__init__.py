"""Decoder-only transformer inference with input-adaptive FFN-block skipping.

The engine splits every layer into an attention sub-step (always executed,
always writing the KV cache) and a feed-forward sub-step that a decode
policy may skip. Skipping only the feed-forward half leaves the cache
complete by construction, so no state copying or recomputation is needed.
"""

from .bench import BenchReport, run_benchmark
from .metrics import (
    DegenerationMetrics,
    compute_degeneration,
    degeneration_score,
    longest_repeated_suffix_period,
)
from .model import (
    CacheInvariantError,
    ConfigError,
    KVCache,
    LayerWeights,
    ModelConfig,
    TokenRangeError,
    Transformer,
    Weights,
    init_random_weights,
    weights_fingerprint,
)
from .modelfile import (
    MissingTensorError,
    ModelFileError,
    TensorShapeError,
    TruncatedPayloadError,
    UnknownFormatVersionError,
    load_model,
    save_model,
)
from .profiling import (
    ColdRegionReport,
    SavingsReport,
    SimilarityProfile,
    detect_cold_regions,
    profile_similarity,
    savings_report,
)
from .skipping import (
    ContextOverflowError,
    DecodeRequest,
    Full,
    GenerationResult,
    InputAdaptive,
    PolicyConfigError,
    RandomAnywhere,
    RandomNonCold,
    Sampling,
    SkipConfig,
    SkipPolicy,
    SkipTrace,
    decode_token_adaptive,
    generate,
    random_skip_mask,
    skip_ratio,
)
from .tensor_ops import (
    ShapeMismatchError,
    ZeroNormError,
    cosine_similarity,
    matmul,
    rms_norm,
    silu,
    softmax,
)
from .tokenizer import BOS_ID, EOS_ID, ByteTokenizer

__version__ = "0.1.0"

__all__ = [
    "BOS_ID",
    "BenchReport",
    "ByteTokenizer",
    "CacheInvariantError",
    "ColdRegionReport",
    "ConfigError",
    "ContextOverflowError",
    "DecodeRequest",
    "DegenerationMetrics",
    "EOS_ID",
    "Full",
    "GenerationResult",
    "InputAdaptive",
    "KVCache",
    "LayerWeights",
    "MissingTensorError",
    "ModelConfig",
    "ModelFileError",
    "PolicyConfigError",
    "RandomAnywhere",
    "RandomNonCold",
    "Sampling",
    "SavingsReport",
    "ShapeMismatchError",
    "SimilarityProfile",
    "SkipConfig",
    "SkipPolicy",
    "SkipTrace",
    "TensorShapeError",
    "TokenRangeError",
    "Transformer",
    "TruncatedPayloadError",
    "UnknownFormatVersionError",
    "Weights",
    "ZeroNormError",
    "compute_degeneration",
    "cosine_similarity",
    "decode_token_adaptive",
    "degeneration_score",
    "detect_cold_regions",
    "generate",
    "init_random_weights",
    "load_model",
    "longest_repeated_suffix_period",
    "matmul",
    "profile_similarity",
    "random_skip_mask",
    "rms_norm",
    "run_benchmark",
    "save_model",
    "savings_report",
    "silu",
    "skip_ratio",
    "softmax",
    "weights_fingerprint",
]
