"""Debiased GMM estimation of production functions with orthogonal instruments."""

__version__ = "0.1.0"

from orthoprod.config import RunConfig
from orthoprod.data import PanelDataset, load_panel_csv, make_folds
from orthoprod.models import DgmmResult, McReport
from orthoprod.pipeline import estimate_panel
