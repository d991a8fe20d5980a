"""
GeoAdapt - Adaptation auto-supervisée au moment du test pour la reconnaissance de lieux LiDAR.
"""

__version__ = "0.1.0"

# Imports principaux pour une utilisation simple du package
try:
    from geoadapt.core.config import RunConfig, load_run_config
    from geoadapt.core.datasets import DatasetManifest, read_manifest, write_manifest
    from geoadapt.core.default.pipeline import GeoAdaptPipeline, run_pipeline
    from geoadapt.core.evaluation import evaluate_extractor
    from geoadapt.core.features import FeatureExtractor
    from geoadapt.core.simulator import shift_domain, simulate_world
except ImportError:
    # Les imports peuvent échouer lors de l'installation
    pass

__all__ = [
    "DatasetManifest",
    "FeatureExtractor",
    "GeoAdaptPipeline",
    "RunConfig",
    "evaluate_extractor",
    "load_run_config",
    "read_manifest",
    "run_pipeline",
    "shift_domain",
    "simulate_world",
    "write_manifest",
    "__version__",
]
