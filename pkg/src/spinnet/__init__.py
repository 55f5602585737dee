"""Gaussian-state simulator for networks of spin-squeezed atomic sensors."""
from .errors import (
    CalibrationError,
    ExportError,
    GaussianValidityWarning,
    InvalidConfigError,
    InvalidStateError,
    NumericalStateError,
    SmallAngleError,
    SpinNetError,
)
from .harness import RunReport, ScenarioConfig, Timings, calibrate_probe, run_scenario
from .measurement import MeasurementRecord, QndConfig, fluorescence_readout, qnd_measure
from .network import GaussianMoments, ModeState, NetworkState, accumulate_phase, init_css, rotate, split_network
from .sequencer import (
    NoiseConfig,
    PulseEvent,
    Timeline,
    build_echo,
    build_interferometer,
    build_ramsey,
    run_timeline,
)

__version__ = "0.1.0"
