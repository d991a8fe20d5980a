"""
Labels d'association entre deux scans.
"""

from dataclasses import dataclass
from enum import Enum

from geoadapt.core.errors import ValidationError
from geoadapt.core.geometry import Pose, pose_distance


class Association(str, Enum):
    POSITIVE = "Positive"
    NEGATIVE = "Negative"
    NEITHER = "Neither"


@dataclass
class LabelingConfig:
    """Seuils de distance (mètres) entre poses : positif si ≤ t_pos, négatif si ≥ t_neg."""

    t_pos: float = 3.0
    t_neg: float = 20.0

    def __post_init__(self):
        if not 0 < self.t_pos < self.t_neg:
            raise ValidationError(
                f"Seuils de labellisation invalides : 0 < t_pos ({self.t_pos}) < t_neg ({self.t_neg}) requis"
            )


def label_from_distance(distance: float, cfg: LabelingConfig) -> Association:
    if distance <= cfg.t_pos:
        return Association.POSITIVE
    if distance >= cfg.t_neg:
        return Association.NEGATIVE
    return Association.NEITHER


def source_label(t_a: Pose, t_b: Pose, cfg: LabelingConfig) -> Association:
    """Label d'une paire de la source à partir de la distance entre ses poses."""
    return label_from_distance(pose_distance(t_a, t_b), cfg)
