"""Toy-scale generative image codec with frequency-aware window attention."""

from .bitstream import Bitstream, Header
from .codec import FFABIC, compress, decompress, file_bpp
from .entropy import FactorizedPrior, GaussianParams, decode_stream, encode_stream, quantize, rate_estimate
from .errors import (ConfigError, ContractError, DivergenceError, FFABError, FormatError, InputError,
                     IntegrityError, ModelError, RangeError, StateError)
from .ffab import IAF, FFABAttention, FFABBlock, FFABConfig, FreqModFFN
from .metrics import RDCurve, RDPoint, bd_rate, ms_ssim, psnr
from .prior import FixedFilterPrior, ToyLatentPrior
from .training import (LossWeights, ModelConfig, TrainConfig, build_model, frequency_loss, load_checkpoint,
                       load_model, rate_loss, save_checkpoint, spatial_loss, total_loss, train)
from .transforms import FULL_PRESET, TOY_PRESET, CodecConfig

__version__ = "0.1.0"
