"""Joint latent class models for repeated markers and competing-cause,
left-truncated survival data."""

__version__ = "0.1.0"

from .data import Dataset, DataError, ingest_dataset, validate_dataset  # noqa: E402
from .estimation import FitResult, fit_model, fit_single, load_fit  # noqa: E402
from .model import ModelSpec, SpecError  # noqa: E402
from .posterior import information_criteria, posterior_probs  # noqa: E402
from .simulate import ScenarioSpec, load_scenario, simulate_sample  # noqa: E402

__all__ = ["Dataset", "DataError", "ingest_dataset", "validate_dataset", "FitResult", "fit_model", "fit_single",
           "load_fit", "ModelSpec", "SpecError", "information_criteria", "posterior_probs", "ScenarioSpec",
           "load_scenario", "simulate_sample", "__version__"]
