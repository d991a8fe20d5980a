"""
Classifieur de cohérence géométrique.

Pour une paire de nuages et ses correspondances proposées :

1. la matrice de cohérence mesure, pour chaque couple de correspondances, si
   la distance entre leurs extrémités est conservée d'un nuage à l'autre ;
2. son vecteur propre dominant, obtenu par itération de la puissance, donne
   l'adhésion de chaque correspondance au groupe d'inliers principal ;
3. ce vecteur, en valeurs absolues triées et ramenées à un maximum de 1, est
   complété par des zéros jusqu'à une longueur fixe ;
4. un MLP à sortie sigmoïde en déduit la probabilité β que les deux nuages
   représentent le même lieu.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.spatial.distance import cdist

from geoadapt.core.correspondence import MIN_CORRESPONDENCES, CorrespondenceSet
from geoadapt.core.errors import TrainingError, ValidationError
from geoadapt.core.geometry import PointCloud
from geoadapt.core.tinynet import MLP, OptimConfig, bce_loss, sgd_step

logger = logging.getLogger(__name__)

# Matrice symétrique |Ĉ|×|Ĉ| à valeurs dans [0, 1], diagonale unité
ConsistencyMatrix = np.ndarray


@dataclass
class ConsistencyConfig:
    """
    Attributes:
        d_thr: Sensibilité aux écarts de longueur (mètres)
        input_length: Longueur fixe L du vecteur de confiance normalisé
        tol: Tolérance de convergence de l'itération de la puissance
        max_iters: Nombre maximal d'itérations
        sort: Trier les confiances par ordre décroissant
        scale: Diviser les confiances par leur maximum
    """

    d_thr: float = 0.5
    input_length: int = 256
    tol: float = 1e-6
    max_iters: int = 200
    sort: bool = True
    scale: bool = True

    def __post_init__(self):
        if self.d_thr <= 0:
            raise ValidationError("d_thr doit être strictement positif")
        if self.input_length < 1:
            raise ValidationError("input_length doit être au moins 1")
        if self.tol <= 0 or self.max_iters < 1:
            raise ValidationError("Paramètres d'itération de la puissance invalides")


@dataclass
class EigenResult:
    vector: np.ndarray
    eigenvalue: float
    iterations: int
    converged: bool


@dataclass
class InlierConfidence:
    """
    Attributes:
        raw: Vecteur propre dominant, une valeur par correspondance
        normalized: Confiances normalisées, longueur L
        converged: L'itération de la puissance a atteint la tolérance
    """

    raw: np.ndarray
    normalized: np.ndarray
    converged: bool = True

    @property
    def n_correspondences(self) -> int:
        return int(self.raw.shape[0])


@dataclass
class PairScore:
    beta: float
    degenerate: bool = False


def consistency_matrix(
    corr: CorrespondenceSet,
    clouds: Tuple[PointCloud, PointCloud],
    cfg: Optional[ConsistencyConfig] = None,
) -> ConsistencyMatrix:
    """
    Matrice de cohérence des longueurs entre correspondances.

    m_ij = max(0, 1 − d_ij² / d_thr²) avec d_ij l'écart entre ‖x_a^i − x_a^j‖
    et ‖x_b^i − x_b^j‖ ; la diagonale vaut 1.

    Raises:
        ValidationError: Si moins de 3 correspondances sont fournies
    """
    cfg = cfg or ConsistencyConfig()
    if len(corr) < MIN_CORRESPONDENCES:
        raise ValidationError("Une matrice de cohérence nécessite au moins 3 correspondances")
    cloud_a, cloud_b = clouds
    corr.check_bounds(len(cloud_a), len(cloud_b))
    points_a = cloud_a.points[corr.index_a].astype(np.float64)
    points_b = cloud_b.points[corr.index_b].astype(np.float64)
    length_gap = np.abs(cdist(points_a, points_a) - cdist(points_b, points_b))
    matrix = np.maximum(0.0, 1.0 - length_gap**2 / cfg.d_thr**2)
    np.fill_diagonal(matrix, 1.0)
    return matrix


def leading_eigenvector(matrix: ConsistencyMatrix, cfg: Optional[ConsistencyConfig] = None) -> EigenResult:
    """
    Vecteur propre dominant par itération de la puissance.

    Le vecteur de départ est le vecteur unité constant ; le signe est fixé pour
    que la somme des composantes soit positive. L'itération s'arrête quand deux
    itérés successifs diffèrent de moins de `tol` en norme L2.

    Returns:
        Vecteur unitaire, valeur propre (quotient de Rayleigh), nombre
        d'itérations et indicateur de convergence
    """
    cfg = cfg or ConsistencyConfig()
    matrix = np.asarray(matrix, dtype=np.float64)
    n = matrix.shape[0]
    if n == 0 or matrix.shape != (n, n):
        raise ValidationError("La matrice doit être carrée et non vide")

    vector = np.full(n, 1.0 / math.sqrt(n))
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_iters + 1):
        image = matrix @ vector
        norm = np.linalg.norm(image)
        if norm == 0.0:
            break
        image /= norm
        if image.sum() < 0:
            image = -image
        step = np.linalg.norm(image - vector)
        vector = image
        if step < cfg.tol:
            converged = True
            break
    if not converged:
        logger.warning(
            "Itération de la puissance non convergée après %d itérations", iterations
        )
    eigenvalue = float(vector @ matrix @ vector)
    return EigenResult(vector, eigenvalue, iterations, converged)


def normalize_confidence(
    vector: np.ndarray, cfg: Optional[ConsistencyConfig] = None
) -> np.ndarray:
    """
    Normalise un vecteur de confiance vers une longueur fixe L.

    Valeurs absolues, tri décroissant, division par le maximum (un vecteur nul
    reste nul), puis troncature ou complétion par des zéros. Le tri et la
    division peuvent être désactivés par la configuration.
    """
    cfg = cfg or ConsistencyConfig()
    values = np.abs(np.asarray(vector, dtype=np.float64).reshape(-1))
    if values.size == 0:
        raise ValidationError("Vecteur de confiance vide")
    if cfg.sort:
        values = np.sort(values)[::-1]
    if cfg.scale:
        peak = values.max()
        if peak > 0:
            values = values / peak
    out = np.zeros(cfg.input_length)
    length = min(cfg.input_length, values.size)
    out[:length] = values[:length]
    return out


def inlier_confidence(
    corr: CorrespondenceSet,
    clouds: Tuple[PointCloud, PointCloud],
    cfg: Optional[ConsistencyConfig] = None,
) -> Optional[InlierConfidence]:
    """Confiance des correspondances d'une paire ; None si la paire est dégénérée."""
    cfg = cfg or ConsistencyConfig()
    if corr.is_degenerate():
        return None
    eigen = leading_eigenvector(consistency_matrix(corr, clouds, cfg), cfg)
    return InlierConfidence(eigen.vector, normalize_confidence(eigen.vector, cfg), eigen.converged)


def build_scorer(
    input_length: int = 256,
    hidden: Sequence[int] = (64, 32),
    seed: int = 0,
    init: str = "glorot",
) -> MLP:
    """Construit le MLP de score L → 64 → 32 → 1 à sortie sigmoïde."""
    return MLP.build(
        [input_length, *hidden, 1],
        output_activation="sigmoid",
        seed=seed,
        init=init,
        name="gcc_scorer",
    )


def score_pair(scorer: MLP, confidence: Optional[Union[InlierConfidence, np.ndarray]]) -> PairScore:
    """
    Score de vraisemblance d'une paire.

    Une paire dégénérée (confidence None) ne passe pas par le réseau et reçoit 0.
    """
    if confidence is None:
        return PairScore(0.0, degenerate=True)
    values = confidence.normalized if isinstance(confidence, InlierConfidence) else confidence
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] != scorer.input_dim:
        raise ValidationError(
            f"Le classifieur attend {scorer.input_dim} confiances, reçu {values.shape[-1]}"
        )
    beta = float(scorer.forward(values, keep_cache=False)[0])
    return PairScore(beta)


@dataclass
class GccTrainingResult:
    epoch_losses: List[float] = field(default_factory=list)
    steps: int = 0
    final_learning_rate: float = 0.0


def train_gcc(
    scorer: MLP,
    samples: Sequence[Tuple[np.ndarray, int]],
    cfg: OptimConfig,
    rng: Optional[np.random.Generator] = None,
) -> GccTrainingResult:
    """
    Entraîne le classifieur par descente de gradient sur l'entropie croisée.

    Args:
        scorer: Le MLP de score, modifié en place
        samples: Couples (confiances normalisées, label 0/1)
        cfg: Optimiseur et planification
        rng: Générateur du mélange des échantillons à chaque époque

    Returns:
        Pertes moyennes par époque, nombre de pas et dernier taux appliqué

    Raises:
        TrainingError: Si les échantillons sont vides ou d'une seule classe
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    if not samples:
        raise TrainingError("Aucun échantillon pour entraîner le classifieur")
    inputs = np.stack([np.asarray(x, dtype=np.float64) for x, _ in samples])
    labels = np.array([int(y) for _, y in samples])
    if np.unique(labels).size < 2:
        raise TrainingError("Les échantillons du classifieur ne contiennent qu'une seule classe")

    n = len(samples)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    result = GccTrainingResult()
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            betas, cache = scorer.forward_train(inputs[batch])
            grads = np.zeros_like(betas)
            for row, (beta, label) in enumerate(zip(betas[:, 0], labels[batch])):
                loss, grad = bce_loss(beta, int(label))
                total += loss
                grads[row, 0] = grad / len(batch)
            scorer.backward(grads, cache)
            result.final_learning_rate = sgd_step(scorer.parameters(), cfg, step, steps_per_epoch)
            step += 1
        result.epoch_losses.append(total / n)
        logger.debug("GCC époque %d : perte %.5f", epoch + 1, total / n)
    result.steps = step
    return result


def classify(scorer: MLP, inputs: np.ndarray) -> np.ndarray:
    """Scores β d'un lot de vecteurs de confiance normalisés."""
    return scorer.forward(np.asarray(inputs, dtype=np.float64), keep_cache=False)[:, 0]


@dataclass
class PairDiagnostic:
    """Enregistrement de diagnostic d'une paire (une ligne JSON par paire)."""

    anchor_id: str
    candidate_id: str
    beta: float
    degenerate: bool
    converged: bool
    n_correspondences: int
    mean_confidence: float
    label: Optional[int] = None
    confidence: List[float] = field(default_factory=list)


def pair_diagnostic(
    anchor_id: str,
    candidate_id: str,
    score: PairScore,
    confidence: Optional[InlierConfidence],
    label: Optional[int] = None,
) -> PairDiagnostic:
    if confidence is None:
        return PairDiagnostic(anchor_id, candidate_id, score.beta, True, True, 0, 0.0, label)
    return PairDiagnostic(
        anchor_id,
        candidate_id,
        score.beta,
        score.degenerate,
        confidence.converged,
        confidence.n_correspondences,
        float(confidence.normalized.mean()),
        label,
        [round(float(v), 6) for v in confidence.normalized if v > 0],
    )


def write_pair_diagnostics(path: Union[str, Path], records: Sequence[PairDiagnostic]) -> Path:
    """Écrit les diagnostics de paires, une ligne JSON par paire."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as handle:
        for record in records:
            handle.write(json.dumps(asdict(record), sort_keys=True) + "\n")
    return path


def read_pair_diagnostics(path: Union[str, Path]) -> List[PairDiagnostic]:
    with open(path, "r", encoding="utf-8") as handle:
        return [PairDiagnostic(**json.loads(line)) for line in handle if line.strip()]
