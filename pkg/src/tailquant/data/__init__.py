from .dataset import (
    ACTIONS_1D,
    ACTIONS_2D,
    FEATURES_1D,
    FEATURES_2D,
    DataError,
    DatasetSplit,
    Normalizer,
    Samples,
    action_histogram,
    oversample,
    split_dataset,
)
from .highd import Recording, SkipReport, TrackRecord, extract_pairs, parse_highd
from .synthetic import SyntheticSpec, synth_generate, synth_true_quantile
