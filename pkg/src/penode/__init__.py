"""Physics-embedded neural ODEs for switched power converters."""
from .automaton import (EVENT_RTOL, EventRecord, ModeSchedule, PwmSpec, TransitionMap,
                        build_schedule, carrier_value, dab_map, encode_modes, gate_log,
                        gate_word, next_crossing, next_event, single_switch_map)
from .dynamics import (CompositionLayout, HybridModel, PhysParams, StateSpaceTemplate,
                       boost_template, buck_template, dab_reduced_template, f_nn, f_phy,
                       generic_template, jac_x, make_model, make_template, vector_field)
from .errors import PenodeError
from .mlp import ResidualNet
from .solvers import (SolverConfig, Trajectory, dopri5_integrate, event_driven_solve,
                      hybrid_integrate, rk4_integrate)

__version__ = "0.1.0"
