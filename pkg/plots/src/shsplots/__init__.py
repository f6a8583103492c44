"""Figure regeneration for the moment-propagation simulator's outputs."""

from .figures import DEFAULT_MOMENT_PANELS, KINDS, FigureSpec, density_grid, render
from .readers import (
    FormatError,
    HeatmapMatrix,
    MedRecord,
    MomentSeries,
    read_checkpoints,
    read_filter,
    read_heatmap,
    read_moments,
)

__version__ = "0.1.0"
