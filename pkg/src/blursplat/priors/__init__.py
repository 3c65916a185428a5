from .features import FeatureMap, extract_features, feature_distance, perceptual_loss
from .providers import (
    DEFAULT_T0,
    GroundTruthOracle,
    NoisyOracle,
    PriorProvider,
    ProviderError,
    RemoteProvider,
    RemoteRequestError,
    RepairRequest,
    TransportError,
    UnsupportedCapability,
    deblur,
    make_provider,
    nearest_reference,
    repair,
)

__all__ = [
    "DEFAULT_T0",
    "FeatureMap",
    "GroundTruthOracle",
    "NoisyOracle",
    "PriorProvider",
    "ProviderError",
    "RemoteProvider",
    "RemoteRequestError",
    "RepairRequest",
    "TransportError",
    "UnsupportedCapability",
    "deblur",
    "extract_features",
    "feature_distance",
    "make_provider",
    "nearest_reference",
    "perceptual_loss",
    "repair",
]
