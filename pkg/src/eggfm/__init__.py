"""Energy-geodesic flow matching: score/energy learning, a data-driven conformal metric, geodesic paths and flows."""

from .config import RunConfig, preset
from .data import Dataset, load_dataset, save_dataset

__all__ = ["RunConfig", "preset", "Dataset", "load_dataset", "save_dataset"]
__version__ = "0.1.0"
