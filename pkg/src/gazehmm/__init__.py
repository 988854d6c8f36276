"""Eye-movement scanpath HMMs: fixation detection, MAP training, VHEM
reduction and condition classification."""

__version__ = "0.1.0"

from .errors import GazeHmmError, ModelError, ParseError, ValidationError  # noqa: E402
from .gaze_io import (GazeSample, ModelRecord, Trial, load_bundled_models,  # noqa: E402
                      parse_gaze_csv, read_model, validate_model, write_model)
from .fixation import Fixation, IdtConfig, detect_fixations, dispersion, fixation_stats  # noqa: E402
from .hmm import (GaussianHmm, TrainConfig, fit_map, gaussian_logpdf, log_likelihood,  # noqa: E402
                  posteriors, sample, viterbi)
from .vhem import (HmmMixture, VhemConfig, elbo_pair, expected_gauss_loglik,  # noqa: E402
                   hard_assignments, reduce)
from .classify import (classify_agreement, classify_loglik, classify_path_distance,  # noqa: E402
                       confusion, roi_spread, viterbi_agreement)

__all__ = [
    "GazeHmmError", "ModelError", "ParseError", "ValidationError",
    "GazeSample", "ModelRecord", "Trial", "load_bundled_models", "parse_gaze_csv", "read_model",
    "validate_model", "write_model",
    "Fixation", "IdtConfig", "detect_fixations", "dispersion", "fixation_stats",
    "GaussianHmm", "TrainConfig", "fit_map", "gaussian_logpdf", "log_likelihood", "posteriors",
    "sample", "viterbi",
    "HmmMixture", "VhemConfig", "elbo_pair", "expected_gauss_loglik", "hard_assignments", "reduce",
    "classify_agreement", "classify_loglik", "classify_path_distance", "confusion", "roi_spread",
    "viterbi_agreement",
]
