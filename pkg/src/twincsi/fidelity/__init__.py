"""Twin fidelity axes: geometry reconstruction and scoring, EM materials."""

from .geometry import (
    Decimation,
    FidelityReport,
    PointCloud,
    PrecisionRecall,
    ReconstructionError,
    TriMesh,
    decimate_mesh,
    f1_score,
    mesh_f1,
    reconstruct_mesh,
    sample_point_cloud,
    threshold_select,
    write_fidelity_csv,
)
from .materials import MaterialDelta, complex_permittivity, itu_material, material_delta, preset_table

__all__ = [
    "Decimation",
    "FidelityReport",
    "MaterialDelta",
    "PointCloud",
    "PrecisionRecall",
    "ReconstructionError",
    "TriMesh",
    "complex_permittivity",
    "decimate_mesh",
    "f1_score",
    "itu_material",
    "material_delta",
    "mesh_f1",
    "preset_table",
    "reconstruct_mesh",
    "sample_point_cloud",
    "threshold_select",
    "write_fidelity_csv",
]
