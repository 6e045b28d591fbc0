"""Simulation and analysis of single-source bidirectional photon-pair clock synchronization."""
from .timebase import ClockModel, clock_read, relative_offset
from .photonsim import ChannelConfig, DetectorConfig, SourceConfig, calibrate_rates, simulate
from .correlation import auto_histogram, car, coarse_acquire, cross_histogram, normalize
from .estimation import (build_template, fit_drift, fit_peak, min_resolvable_separation,
                         offset_from_peaks, stability)
from .tracking import OffsetTracker, track_offsets

__version__ = "0.1.0"
