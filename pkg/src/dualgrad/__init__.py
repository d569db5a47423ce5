"""Distributed dual gradient toolkit for block-separable convex programs.

Solves problems of the form

    min  sum_i f_i(z_i)   s.t.  A z = b,  C z <= c

with strongly convex smooth blocks and block-sparse coupling, by projected
gradient ascent on the Lagrangian dual with a diagonal weight matrix as
step size.  Each weight is assembled from purely local quantities, so the
iteration runs as message passing over the coupling graph; the package
also ships the centralized scalar-step baseline, a high-accuracy reference
solver, convergence diagnostics, validation probes for the inequalities
behind the linear convergence rates, a networked-control front end, and a
seeded instance generator.
"""

from .errors import (ConvergenceError, GenerationError, LocalityError,
                     NumericsError, StructureError, UnsupportedInstanceError)
from .model import (BipartiteGraph, BlockProblem, DualPoint, PrimalPoint,
                    ValidationReport, apply_constraints, assemble_dense,
                    load_problem, neighborhoods, save_problem, validate)
from .oracles import (BlockObjective, block_constants,
                      conjugate_strong_convexity, eval_lagrangian,
                      eval_objective, solve_block)
from .stepsize import (Weights, assemble_weights, block_dual_lipschitz,
                       compute_weights, global_dual_lipschitz,
                       spectral_norm_sq, tightness_instance)
from .dual_algo import (MetricRow, RunTrace, StopRule, cg_step, dg_step,
                        dual_gradient, dual_value, load_trace_csv, metrics,
                        project_onto_domain, prox_residual, run)
from .reference import (RefSolution, dense_dual_gradient, dense_dual_value,
                        kkt_solve_equality, load_reference, save_reference,
                        solve_reference)
from .error_bound import (InequalityCampaign, ProbeReport, check_descent_lemma,
                          check_lemma4, check_prox_lipschitz3, full_row_rank,
                          inequality_campaign, probe_error_bound,
                          sample_dual_points, strong_concavity_constant)
from .gen import generate, generate_full_row_rank, scalar_demo_problem
from .sim import (MessageLog, MessageRecord, post_message, run_distributed,
                  verify_locality)
from .dmpc import (NetworkedSystem, StageStepper, Subsystem, build_problem,
                   closed_form_check, load_system, random_network, save_system)

__version__ = "0.1.0"
