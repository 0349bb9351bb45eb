"""Least-squares MEG/EEG dipole localization by alternating projection."""

from .errors import (AplocError, DegenerateGrid, DegenerateWaveforms, FormatError,
                     InsufficientGrid, InvalidData, InvalidGeometry, NumericalError,
                     SilentSources, SingularPencil, SingularSystem)
from .forward import (Dipole, SensorArray, SourceSpace, build_spherical_grid,
                      default_sensor_array, load_gain_table, precompute_gain,
                      save_gain_table, sphere_lead_field)
from .linalg import (covariance, max_generalized_eig, orthonormal_basis, projector,
                     signal_subspace)
from .localizers import (LocalizationResult, Method, ScanObjective, SolverConfig, ap_localize,
                         ap_music, ap_sync, ap_wmusic, classic_music, localize, rap_beamformer,
                         rap_music)
from .simulate import (Dataset, WaveformSet, estimate_timecourses, load_dataset, make_waveforms,
                       save_dataset, synthesize)
from .bench import ExperimentPlan, Geometry, make_trial_sources, match_sources, orientation_field, run_plan

__version__ = "0.1.0"
