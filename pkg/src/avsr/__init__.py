"""Audio-visual transducer speech recognition at desk scale."""

from .audio_frontend import (
    FeatureSequence,
    FrameRateMode,
    FramingPlan,
    MelFilterbank,
    Waveform,
    build_mel_filterbank,
    compute_stft,
    extract_features,
    log_mel,
    make_variable_hop_schedule,
    stack_and_decimate,
)
from .decoding import BeamHypothesis, DecodeResult, beam_decode, greedy_decode
from .model import (
    AvsrModel,
    GraphemeInventory,
    ModalitySwitch,
    ModelConfig,
    count_parameters,
    full_scale_config,
)
from .scoring import WerReport, confidence_interval_95, word_error_rate
from .training import DropoutPolicy, LrSchedule, TrainConfig, adam_step, train
from .transducer import LossLattice, logadd, transducer_loss, transducer_loss_torch
from .video_frontend import VideoClip, VideoFrontend, VideoFrontendConfig, smooth_landmarks

__version__ = "0.1.0"
