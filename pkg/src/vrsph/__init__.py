"""Volume-reconstruction SPH: kernels, particle geometry, moment-corrected
operators, a monotone Poisson discretisation and a Poiseuille flow solver."""

from ._jit import BACKEND
from .geometry import (BOUNDARY, INTERIOR, VIRTUAL, Box, GeometryError, NeighborTable, ParticleSet,
                       SimplicialMesh, build_neighbor_table, covering_radius_oracle, delaunay_2d,
                       estimate_covering_radius, generate_perturbed, generate_random, generate_triangle_centroids,
                       generate_uniform, smoothing_length)
from .kernels import KernelFamily, KernelSpec, eval_w, grad_w, verify_kernel_properties
from .operators import (SingularMomentMatrix, fpm_all, fpm_first_order, fpm_second_order, sph_divergence_all,
                        sph_function_all, sph_gradient_all, sph_laplacian_all, sph_morris_all)
from .poiseuille import FlowConfig, FlowState, analytic_poiseuille, run_poiseuille, step_leapfrog
from .poisson import (PoissonProblem, PoissonStudyConfig, assemble_discrete_laplacian, manufactured_poisson_study,
                      solve, verify_m_matrix)
from .reconstruction import (Mode, NNLSError, RegularityError, WeightTable, assemble_moment_system, nnls,
                             reconstruct_volumes, regularity_report, vrsph_function_all, vrsph_gradient_all,
                             vrsph_laplacian_all, vrsph_morris_all)

__version__ = "0.1.0"
