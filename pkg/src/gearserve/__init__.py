"""gearserve: offline gear-plan optimization and online serving for model
cascades, driven entirely by recorded profiles and validation outputs."""

from .types import (
    Cascade,
    Device,
    Gear,
    GearPlan,
    ModelOutput,
    ModelProfile,
    Placement,
    ProfileSet,
    QpsDistribution,
    Replica,
    Slo,
    ValidationRecord,
    ValidationSet,
    WorkloadTrace,
    zipf_distribution,
)

__all__ = [
    "Cascade", "Device", "Gear", "GearPlan", "ModelOutput", "ModelProfile",
    "Placement", "ProfileSet", "QpsDistribution", "Replica", "Slo",
    "ValidationRecord", "ValidationSet", "WorkloadTrace", "zipf_distribution",
]

__version__ = "0.1.0"
