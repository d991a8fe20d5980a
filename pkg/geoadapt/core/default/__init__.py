"""
Implémentations par défaut : stockage sur disque, étapes et pipeline d'adaptation.
"""

from geoadapt.core.default.ablation import ablation_sweep
from geoadapt.core.default.disk_store import DiskStore
from geoadapt.core.default.pipeline import GeoAdaptPipeline, run_pipeline

__all__ = [
    "DiskStore",
    "GeoAdaptPipeline",
    "ablation_sweep",
    "run_pipeline",
]
