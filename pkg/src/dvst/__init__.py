"""Deep video semantic transmission over simulated wireless channels."""

from .channel import ChannelConfig, SymbolStream, measure_snr, power_normalize, transmit
from .config import Config, paper_config, preset, toy_config
from .entropy import (ConditionalEntropyModel, FactorizedDensity, LaplaceParams,
                      add_uniform_noise, embedding_entropy, factorized_pmf,
                      laplace_uniform_pmf)
from .jscc import (RateTokens, ValueSet, account_cbr, allocate, cbr_components,
                   quantize_rate)
from .model import DvstModel, load_checkpoint, save_checkpoint
from .pipeline import (FrameResult, RxState, TxState, run_sequence,
                       transmit_iframe, transmit_pframe)
from .training import (LossReport, StageConfig, finetune_eta, make_schedule,
                       train_progressive)
from .transform import warp
from .video_io import (Frame, Gop, load_sequence, ms_ssim, ms_ssim_db,
                       partition_gops, psnr)

__version__ = "0.1.0"
