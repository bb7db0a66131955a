"""Reconstruction of anisotropic conductivities from boundary measurements
of the weighted extension problem for fractional operators."""

from .specfun import (
    Order,
    PaperConstants,
    IdentityReport,
    bessel_ik,
    check_bessel_identities,
    eval_I,
    eval_I_reflected,
    eval_K,
    gamma_constants,
    paper_constants,
)
from .odekernel import (
    GridSpec,
    RadialProfile,
    bessel_k_profile,
    homogeneous_profile,
    ode_residual,
    solve_inhomogeneous,
    weighted_flux_limit,
)
from .ansatz import (
    BoundaryData,
    CutoffProfile,
    ProbeSpec,
    TangentialGrid,
    admissible_frequencies,
    ansatz_residual,
    build_ansatz,
    dirichlet_data,
    make_cutoff,
    neumann_data,
)
from .extsolver import (
    ConductivityField,
    ResolutionSpec,
    WeightedGrid,
    build_domain,
    dtn_pairing,
    field_from_spec,
    fourier_reference,
    ntd_pairing,
    solve_dirichlet,
    solve_neumann,
)
from .reconstruct import (
    assemble_tensor,
    probe_direction,
    quadratic_form_from_limit,
    recover_metric_from_weighted,
    reconstruct_tensor,
    stability_gap,
    weighted_form_from_metric,
)

__version__ = "0.1.0"
