"""EEG channel infilling and superresolution at desk scale.

Preprocessing and harmonization of multichannel recordings, a
spherical-spline interpolation baseline, a position-aware rectified-flow
autoencoder for masked channel reconstruction at arbitrary electrode
positions, and an NMSE-vs-dropout evaluation harness.
"""

from .model import (
    FlowAutoencoder,
    LatentSequence,
    ModelConfig,
    ParamStore,
    decode,
    encode,
    load_checkpoint,
    rope4d,
    save_checkpoint,
)
from .pipeline import (
    ChannelGeometry,
    Epoch,
    QcReport,
    Recording,
    common_average_reference,
    detect_bad_channels,
    detect_line_noise,
    epoch_segment,
    highpass,
    notch_filter,
    preprocess_recording,
    qc_epochs,
    resample,
    rescale_for_training,
    welch_psd,
    zscore_normalize,
)
from .sampling import SamplerConfig, nmse, reconstruct, reconstruct_batch
from .spline import SplineConfig, SplineSolve, fit, interpolate, interpolate_epoch, legendre_g
from .sweep import SweepSpec, run_sweep, write_sweep_csv
from .synth import SynthSpec, standard_layout_64, synth_generate
from .tokenizer import (
    Coord4,
    PackedBatch,
    TokenGrid,
    TokenSequence,
    bin_coordinates,
    interleave_registers,
    pack_samples,
    raster_serialize,
    strip_registers,
    window_tokens,
)
from .training import (
    AlwState,
    DropoutPlan,
    FlowSample,
    TrainConfig,
    adaptive_weight,
    lr_at,
    mmd_loss,
    sample_dropout,
    train,
)
from .zeeg import ZeegError, read_zeeg, write_zeeg

__version__ = "0.1.0"
