"""Python bindings for the relulab C++ core."""

from ._relulab import (
    ContractViolation,
    DimensionError,
    __version__,
    anisotropy,
    config_hash,
    gradcheck,
    output_variance_ratio,
    reg_loss,
    theorem1_report,
    top_p_mass,
    train,
    variance_probe,
)

__all__ = [
    "ContractViolation",
    "DimensionError",
    "__version__",
    "anisotropy",
    "config_hash",
    "gradcheck",
    "output_variance_ratio",
    "reg_loss",
    "theorem1_report",
    "top_p_mass",
    "train",
    "variance_probe",
]
