"""Post-selected non-Hermitian qubit: trajectories, spectra, optimal paths."""

__version__ = "0.1.0"

from .core import (
    SystemParams,
    apply_update,
    bloch_from_rho,
    density_from_amplitudes,
    drive_unitary,
    hybrid_kraus,
    photon_counting_kraus,
    rho_from_bloch,
)
from .liouvillian import (
    LiouvillianSpectrum,
    evolve_normalized,
    evolve_ode,
    evolve_spectral,
    find_ep,
    lindblad3_superoperator,
    liouvillian_matrix,
    spectral_decompose,
    spectrum_scan,
)

__all__ = [
    "SystemParams",
    "apply_update",
    "bloch_from_rho",
    "density_from_amplitudes",
    "drive_unitary",
    "hybrid_kraus",
    "photon_counting_kraus",
    "rho_from_bloch",
    "LiouvillianSpectrum",
    "evolve_normalized",
    "evolve_ode",
    "evolve_spectral",
    "find_ep",
    "lindblad3_superoperator",
    "liouvillian_matrix",
    "spectral_decompose",
    "spectrum_scan",
    "__version__",
]
