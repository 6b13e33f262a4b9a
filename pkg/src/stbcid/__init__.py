"""SM vs Alamouti space-time block code recognition toolkit."""

from .signal_model import (
    ChannelRealization,
    CodingScheme,
    NoiseSpec,
    ReceiveConfig,
    draw_channel,
    encode,
    modulate_qpsk,
    noise_variance_for_snr,
    receive,
)
from .dataset import (
    Burst,
    DatasetConfig,
    FrameSet,
    deserialize_frames,
    generate_dataset,
    serialize_frames,
    split_train_val,
    synthesize_burst,
    to_iq,
    window_frames,
)
from .classifier import (
    Model,
    ModelSpec,
    TrainConfig,
    TrainHistory,
    build_cnn2,
    initialize,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from .baseline_corr import (
    CorrelationFeature,
    ThresholdRule,
    calibrate_threshold,
    classify_corr,
    correlation_feature,
)
from .evaluation import AccuracyCurve, LossCurve, accuracy_vs_snr, confusion_matrix
from .errors import ParameterError, ShapeError

__version__ = "0.1.0"
