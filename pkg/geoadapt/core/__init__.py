"""
Modules principaux de GeoAdapt : géométrie, réseaux, descripteurs et étiquetage.
"""

from geoadapt.core.base_extractor import BaseExtractor
from geoadapt.core.base_store import BaseStore
from geoadapt.core.errors import GeoAdaptError
from geoadapt.core.features import FeatureExtractor
from geoadapt.core.geometry import PointCloud, Pose

__all__ = [
    "BaseExtractor",
    "BaseStore",
    "FeatureExtractor",
    "GeoAdaptError",
    "PointCloud",
    "Pose",
]
