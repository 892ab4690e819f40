"""Learned lossless and lossy point-cloud geometry codec."""

from .codec import CodecConfig, DecodeResult, decode, encode, quantize_depth, quantize_mm
from .entropy import Bitstream, RangeDecoder, RangeEncoder, quantize_prob
from .errors import *  # noqa: F401,F403
from .metrics import RdCurve, RdPoint, bd_rate, d1_psnr, d2_psnr
from .mopa import NpaPredictor, UniformPredictor, aggregate, code_scale, predict_stage
from .nn.weights import ModelConfig, ModelWeights
from .sparse_tensor import Neighborhood, SparseTensor, downscale, expand_octants, knn

__version__ = "0.1.0"
