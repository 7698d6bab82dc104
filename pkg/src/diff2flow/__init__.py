"""Convert a pretrained toy diffusion prior into a flow-matching model.

The package aligns diffusion and flow-matching trajectories (time remapping,
interpolant rescaling, objective change), trains small numpy MLPs under
several finetuning regimes, and benchmarks them on 2-D toy data.
"""

from diff2flow.schedule import NoiseSchedule, make_linear_vp_schedule
from diff2flow.bridge import t_dm_to_fm, t_fm_to_dm, x_dm_to_fm, x_fm_to_dm
from diff2flow.convert import Parameterization, estimate_endpoints, velocity_from_diffusion
from diff2flow.net import ToyModel

__all__ = [
    "NoiseSchedule",
    "Parameterization",
    "ToyModel",
    "estimate_endpoints",
    "make_linear_vp_schedule",
    "t_dm_to_fm",
    "t_fm_to_dm",
    "velocity_from_diffusion",
    "x_dm_to_fm",
    "x_fm_to_dm",
]

__version__ = "0.1.0"
