"""Corner-space renormalization for driven-dissipative Bose-Hubbard lattices."""

from .lattice import Geometry, MergeSchedule, build_geometry, plan_merge_schedule
from .model import Cluster, ModelParams, assemble_hamiltonian, build_base_cluster, jump_operators
from .steadystate import DensityMatrix, evolve_to_steady_state, lindblad_rhs, steady_state_nullspace
from .corner import converge_in_m, merge_clusters, select_top_m_pairs, solve_cluster
from .meanfield import gutzwiller_fixed_point
from .observables import ObservableRecord, evaluate, probability_spectrum

__version__ = "0.1.0"
