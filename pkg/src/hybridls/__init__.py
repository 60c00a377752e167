"""Hybrid least squares: function approximation from highly noisy evaluations.

Christoffel-sampled designs, optimised allocation of repeated evaluations,
(re)weighted least-squares decoding, cone-constrained projection, random
subspaces and a Black-Scholes spread-option surrogate study.
"""

from .allocation import (Allocation, NoiseProfile, a_optimal_allocation, condition_J, integer_counts,
                         neyman_allocation, objective_G, objective_H, support_sparsity,
                         uniform_allocation)
from .basis import (BasisSet, ChristoffelProfile, DiscreteBasis, christoffel, discretize_basis,
                    tensor_legendre_basis)
from .constraint import ConvexCone, contraction_check, nnls, project
from .decoder import (Approximant, EvaluationVector, NoisyOracle, decode_plain, decode_reweighted,
                      evaluate_budget, estimate_variance, mse, run_erm, run_hls)
from .domain import HyperRectangle, PointStream, ProductMeasure, generate_points, quadrature_integral
from .errors import (ConfigError, HybridLSError, NumericalError, QuadratureError, RankDeficiencyError,
                     SamplingError, StageError)
from .finance import BSModel, QuoteGrid, calibrate, margrabe_price, payoff_field, synth_market
from .harness import ExperimentConfig, emit_report, load_config, run_finance, run_synthetic
from .random_subspace import (RandomFieldGenerator, build_subspace, empirical_kernel_spectrum,
                              mc_average_baseline, subspace_error_curve)
from .sampler import (BoostingPolicy, SampleDesign, boost, sample_induced_continuous,
                      sample_induced_discrete)
from .seeding import SeedPlan

__version__ = "0.1.0"
