"""Small float64 neural-network core: layers, training loop, gradient check, bundles."""
from .bundle import Bundle, BundleError, BundleIntegrityError, BundleVersionError, load_bundle, save_bundle
from .functional import ShapeError
from .gradcheck import gradient_check
from .model import ModelConfig, Sequential, build_model, count_dense_params, count_lstm_params
from .training import EarlyStopping, TrainConfig, fit, step_decay

__all__ = [
    "Bundle", "BundleError", "BundleIntegrityError", "BundleVersionError", "load_bundle", "save_bundle",
    "ShapeError", "gradient_check", "ModelConfig", "Sequential", "build_model", "count_dense_params",
    "count_lstm_params", "EarlyStopping", "TrainConfig", "fit", "step_decay",
]
