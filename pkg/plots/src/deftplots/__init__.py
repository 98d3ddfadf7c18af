"""Chart rendering for deftsim metrics artifacts."""

from .artifacts import RunArtifact, SchemaError, load_glob, load_run
from .charts import CHART_KINDS, render

__version__ = "0.1.0"
