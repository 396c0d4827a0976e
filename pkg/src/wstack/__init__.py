"""Desk-scale w-stacking imaging with message accounting and energy reports.

The package grids interferometric visibility samples onto an N_u x N_v x N_w
mesh, Fourier-transforms each w plane over a slab decomposition, applies the
per-plane phase correction, and stacks planes into a sky image. A virtual
node x rank topology runs in-process; every inter-rank transfer is logged
with byte counts so reduction strategies can be compared. The metrics layer
computes green productivity and the associated frequency/scaling reports
from measured or injected (seconds, joules) traces.
"""

__version__ = "0.1.0"
