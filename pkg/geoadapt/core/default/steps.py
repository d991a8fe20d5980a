"""
Étapes de l'adaptation.

A. pré-entraînement sur la source (perte triplet + perte contrastive locale) ;
B. entraînement du classifieur de cohérence géométrique sur la source ;
C. génération des pseudo-labels sur la cible, sans ses poses ;
D. ré-entraînement de l'encodeur et de la tête globale sur les pseudo-tuples.

Chaque étape tire ses nombres aléatoires d'un générateur propre, dérivé de la
graine et du rang de l'étape, de sorte qu'une étape reprise depuis un
checkpoint produit exactement le même résultat.
"""

import logging
import math
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from geoadapt.core.config import RunConfig, TrainingConfig
from geoadapt.core.correspondence import gt_correspondences, propose_correspondences
from geoadapt.core.datasets import DatasetManifest
from geoadapt.core.errors import ConfigError, DataError, StarvationError, TrainingError
from geoadapt.core.evaluation import roc_auc
from geoadapt.core.features import ExtractionCache, FeatureExtractor
from geoadapt.core.gcc import (
    InlierConfidence,
    build_scorer,
    classify,
    inlier_confidence,
    train_gcc,
    write_pair_diagnostics,
)
from geoadapt.core.geometry import PointCloud, Pose, SpatialIndex, apply_pose, pairwise_pose_distances
from geoadapt.core.labels import LabelingConfig
from geoadapt.core.pseudolabel import (
    PseudoLabelResult,
    TrainingTuple,
    build_tuples,
    extract_all,
    labels_from_poses,
    pseudo_label_dataset,
    write_audit,
    write_tuples,
)
from geoadapt.core.stage_report import StageReport
from geoadapt.core.tinynet import MLP, hardest_contrastive_loss, sgd_step, triplet_loss

logger = logging.getLogger(__name__)

STAGES = ("pretrain", "gcc", "pseudolabel", "retrain")

Forward = Tuple[np.ndarray, np.ndarray, ExtractionCache]


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    """Générateur propre à une étape."""
    return np.random.default_rng([seed, STAGES.index(stage)])


def augment_cloud(
    cloud: PointCloud, pose: Optional[Pose], rng: np.random.Generator, cfg: TrainingConfig
) -> Tuple[PointCloud, Optional[Pose]]:
    """
    Rotation aléatoire autour de z et bruit gaussien sur les points.

    La pose est compensée par la rotation inverse : la géométrie dans le
    monde est inchangée au bruit près.

    Args:
        cloud: Le nuage dans le repère capteur
        pose: Sa pose dans le monde, ou None pour un jeu sans poses
        rng: Générateur des tirages
        cfg: Amplitude de la rotation et écart-type du bruit

    Returns:
        (nuage augmenté, pose compensée ou None)
    """
    limit = math.radians(cfg.rotation_augmentation)
    yaw = float(rng.uniform(-limit, limit)) if limit > 0 else 0.0
    rotation = Pose.from_yaw(yaw, np.zeros(3))
    rotated = apply_pose(rotation, cloud)
    points = rotated.points.astype(np.float64)
    if cfg.jitter_sigma > 0:
        points = points + rng.normal(0.0, cfg.jitter_sigma, size=points.shape)
    augmented = PointCloud(points, rotated.intensity)
    compensated = pose.compose(rotation.inverse()) if pose is not None else None
    return augmented, compensated


def _forward_many(extractor: FeatureExtractor, clouds: Sequence[PointCloud], threads: int) -> List[Forward]:
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        return list(pool.map(extractor.forward_train, clouds))


@dataclass
class SourceLabels:
    """
    Labels de vérité terrain de toutes les paires de la source.

    Attributes:
        distances: Distances entre poses (n, n)
        positives: Pour chaque scan, les indices à distance ≤ t_pos (lui-même exclu)
        negatives: Pour chaque scan, les indices à distance ≥ t_neg
        anchors: Les scans ayant au moins un positif et un négatif
    """

    distances: np.ndarray
    positives: List[np.ndarray]
    negatives: List[np.ndarray]
    anchors: np.ndarray


def mine_source_labels(source: DatasetManifest, labeling: LabelingConfig) -> SourceLabels:
    """
    Raises:
        DataError: Si la source n'a pas de poses
    """
    if not source.has_poses():
        raise DataError("La source doit avoir des poses pour l'entraînement supervisé")
    distances = pairwise_pose_distances(source.poses())
    n = distances.shape[0]
    positives, negatives = [], []
    for i in range(n):
        row = distances[i]
        near = np.flatnonzero(row <= labeling.t_pos)
        positives.append(near[near != i])
        negatives.append(np.flatnonzero(row >= labeling.t_neg))
    anchors = np.array(
        [i for i in range(n) if positives[i].size and negatives[i].size], dtype=np.int64
    )
    return SourceLabels(distances, positives, negatives, anchors)


def _hardest(anchor: np.ndarray, outputs: Sequence[Forward], slots: Sequence[int]) -> int:
    """Emplacement du négatif le plus proche de l'ancre (plus petit emplacement en cas d'égalité)."""
    distances = [float(np.linalg.norm(anchor - outputs[s][0])) for s in slots]
    return slots[int(np.argmin(distances))]


def _pretrain_batch(
    extractor: FeatureExtractor,
    batch: np.ndarray,
    labels: SourceLabels,
    source: DatasetManifest,
    poses: Sequence[Pose],
    cfg: RunConfig,
    rng: np.random.Generator,
    threads: int,
) -> float:
    members: Dict[int, int] = {}
    picks = []
    for i in batch:
        i = int(i)
        positive = int(rng.choice(labels.positives[i]))
        k = min(cfg.training.negatives_per_anchor, labels.negatives[i].size)
        negatives = np.sort(rng.choice(labels.negatives[i], size=k, replace=False))
        picks.append((i, positive))
        for j in (i, positive, *negatives):
            members.setdefault(int(j), len(members))

    scans = list(members)
    augmented = [augment_cloud(source.cloud(j), poses[j], rng, cfg.training) for j in scans]
    outputs = _forward_many(extractor, [cloud for cloud, _ in augmented], threads)
    grad_global = [np.zeros_like(g) for g, _, _ in outputs]
    grad_local = [np.zeros_like(local) for _, local, _ in outputs]

    n = float(len(picks))
    weight = cfg.training.local_loss_weight
    total = 0.0
    for i, positive in picks:
        a, p = members[i], members[positive]
        in_batch = [members[j] for j in scans if labels.distances[i, j] >= cfg.labeling.t_neg]
        neg = _hardest(outputs[a][0], outputs, in_batch)
        triplet = triplet_loss(outputs[a][0], outputs[p][0], outputs[neg][0], cfg.triplet)
        total += triplet.loss
        grad_global[a] += triplet.grad_anc / n
        grad_global[p] += triplet.grad_pos / n
        grad_global[neg] += triplet.grad_neg / n

        if weight <= 0:
            continue
        (cloud_a, pose_a), (cloud_p, pose_p) = augmented[a], augmented[p]
        if cloud_a.is_empty() or cloud_p.is_empty():
            continue
        corr = gt_correspondences(cloud_a, cloud_p, pose_a, pose_p, cfg.correspondence.gt_max_dist)
        if not len(corr):
            continue
        contrastive = hardest_contrastive_loss(
            outputs[a][1], outputs[p][1], corr.index_a, corr.index_b, cfg.contrastive, rng
        )
        total += weight * contrastive.loss
        grad_local[a] += weight * contrastive.grad_a / n
        grad_local[p] += weight * contrastive.grad_b / n

    for (_, _, cache), g, local in zip(outputs, grad_global, grad_local):
        extractor.backward(cache, g, local)
    return total / n


def pretrain_source(
    extractor: FeatureExtractor,
    source: DatasetManifest,
    cfg: RunConfig,
    rng: Optional[np.random.Generator] = None,
    threads: int = 1,
) -> Tuple[FeatureExtractor, StageReport]:
    """
    Étape A : pré-entraînement supervisé sur la source.

    Pour chaque lot d'ancres, un positif est tiré au hasard et le négatif
    le plus dur parmi les scans du lot est retenu ; les correspondances de
    vérité terrain entre l'ancre et son positif alimentent la perte locale.

    Args:
        extractor: Extracteur initial (non modifié)
        source: Jeu source avec poses
        cfg: Configuration de l'exécution
        rng: Générateur de l'étape (par défaut dérivé de la graine)
        threads: Nombre de fils pour l'extraction

    Returns:
        (extracteur entraîné, compte rendu)

    Raises:
        DataError: Source sans poses
        ConfigError: Aucun triplet ne peut être formé avec les seuils de labellisation
    """
    started = time.perf_counter()
    rng = rng if rng is not None else stage_rng(cfg.seed, "pretrain")
    optim = cfg.scaled("pretrain")
    labels = mine_source_labels(source, cfg.labeling)
    if labels.anchors.size == 0:
        raise ConfigError(
            f"Aucun triplet possible : aucun scan n'a à la fois un positif (≤ t_pos = {cfg.labeling.t_pos} m) "
            f"et un négatif (≥ t_neg = {cfg.labeling.t_neg} m)",
            key="labeling.t_pos",
        )
    extractor = extractor.copy()
    extractor.zero_grad()
    params = extractor.parameters(train_local=True)
    poses = source.poses()
    steps_per_epoch = math.ceil(labels.anchors.size / optim.batch_size)

    epoch_losses: List[float] = []
    step = 0
    for epoch in range(optim.epochs):
        order = rng.permutation(labels.anchors)
        total = 0.0
        for start in range(0, order.size, optim.batch_size):
            batch = order[start : start + optim.batch_size]
            loss = _pretrain_batch(extractor, batch, labels, source, poses, cfg, rng, threads)
            lr = sgd_step(params, optim, step, steps_per_epoch)
            logger.debug("Pré-entraînement pas %d : perte %.5f, lr %.2e", step, loss, lr)
            total += loss * batch.size
            step += 1
        epoch_losses.append(total / order.size)
        logger.info("Pré-entraînement époque %d/%d : perte %.5f", epoch + 1, optim.epochs, epoch_losses[-1])

    report = StageReport(
        stage="pretrain",
        epochs=optim.epochs,
        final_loss=epoch_losses[-1] if epoch_losses else 0.0,
        wall_time=time.perf_counter() - started,
        epoch_losses=epoch_losses,
        extra={"anchors": int(labels.anchors.size), "steps": step},
    )
    return extractor, report


def sample_source_pairs(
    labels: SourceLabels,
    global_desc: np.ndarray,
    cfg: RunConfig,
    rng: np.random.Generator,
) -> List[Tuple[int, int, int]]:
    """
    Paires source équilibrées pour le classifieur : (i, j, label), i < j.

    La moitié des négatifs est prise, quand c'est possible, parmi les plus
    proches voisins en descripteur global (négatifs difficiles), le reste au
    hasard parmi tous les négatifs.

    Raises:
        TrainingError: Si la source n'offre pas de paire positive et de paire négative
    """
    n = labels.distances.shape[0]
    rows, cols = np.triu_indices(n, 1)
    pair_distances = labels.distances[rows, cols]
    positive_pairs = np.flatnonzero(pair_distances <= cfg.labeling.t_pos)
    negative_pairs = np.flatnonzero(pair_distances >= cfg.labeling.t_neg)
    if positive_pairs.size == 0 or negative_pairs.size == 0:
        raise TrainingError(
            f"Paires source insuffisantes pour le classifieur : {positive_pairs.size} positives, "
            f"{negative_pairs.size} négatives"
        )
    n_pos = min(cfg.training.gcc_pairs // 2, positive_pairs.size)
    n_neg = min(n_pos, negative_pairs.size)
    chosen_pos = rng.choice(positive_pairs, size=n_pos, replace=False)

    index = SpatialIndex(global_desc)
    reach = min(cfg.pseudolabel.k, n - 1) + 1
    hard = set()
    for i in range(n):
        for j, _ in index.knn(global_desc[i], reach):
            if j != i and labels.distances[i, j] >= cfg.labeling.t_neg:
                hard.add((min(i, j), max(i, j)))
    hard_pairs = sorted(hard)
    n_hard = min(len(hard_pairs), n_neg // 2)
    picked = {hard_pairs[k] for k in rng.choice(len(hard_pairs), size=n_hard, replace=False)} if n_hard else set()
    for k in rng.permutation(negative_pairs):
        if len(picked) >= n_neg:
            break
        picked.add((int(rows[k]), int(cols[k])))

    pairs = [(int(rows[k]), int(cols[k]), 1) for k in chosen_pos]
    pairs += [(i, j, 0) for i, j in sorted(picked)]
    return sorted(pairs)


def train_gcc_stage(
    extractor: FeatureExtractor,
    source: DatasetManifest,
    cfg: RunConfig,
    rng: Optional[np.random.Generator] = None,
    threads: int = 1,
) -> Tuple[MLP, StageReport]:
    """
    Étape B : entraînement du classifieur sur des paires source labellisées.

    L'extracteur est figé. Une fraction des paires est réservée pour mesurer
    l'exactitude et l'AUC du classifieur.

    Returns:
        (classifieur entraîné, compte rendu)
    """
    started = time.perf_counter()
    rng = rng if rng is not None else stage_rng(cfg.seed, "gcc")
    labels = mine_source_labels(source, cfg.labeling)
    global_desc, local_desc = extract_all(extractor, source, threads)
    pairs = sample_source_pairs(labels, global_desc, cfg, rng)

    def confidence(pair: Tuple[int, int, int]) -> Optional[InlierConfidence]:
        i, j, _ = pair
        clouds = (source.cloud(i), source.cloud(j))
        corr = propose_correspondences(
            local_desc[i],
            local_desc[j],
            clouds,
            cfg.correspondence.max_correspondences,
            cfg.correspondence.mutual,
        )
        return inlier_confidence(corr, clouds, cfg.consistency)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        confidences = list(pool.map(confidence, pairs))
    samples = [
        (conf.normalized, label) for conf, (_, _, label) in zip(confidences, pairs) if conf is not None
    ]
    n_degenerate = len(pairs) - len(samples)
    if n_degenerate:
        logger.warning("%d paires dégénérées écartées de l'entraînement du classifieur", n_degenerate)

    order = rng.permutation(len(samples))
    n_holdout = int(round(len(samples) * cfg.training.gcc_holdout))
    holdout = [samples[k] for k in order[:n_holdout]]
    train = [samples[k] for k in order[n_holdout:]]

    scorer = build_scorer(cfg.consistency.input_length, seed=cfg.seed + 3)
    result = train_gcc(scorer, train, cfg.scaled("gcc"), rng)

    extra: Dict[str, object] = {
        "pairs": len(pairs),
        "degenerate": n_degenerate,
        "train": len(train),
        "holdout": len(holdout),
    }
    if holdout:
        betas = classify(scorer, np.stack([x for x, _ in holdout]))
        truth = np.array([y for _, y in holdout])
        extra["holdout_accuracy"] = float(np.mean((betas >= 0.5).astype(int) == truth))
        if np.unique(truth).size == 2:
            extra["holdout_auc"] = roc_auc(betas, truth)
        logger.info("Classifieur : exactitude %.3f sur %d paires réservées", extra["holdout_accuracy"], len(holdout))

    report = StageReport(
        stage="gcc",
        epochs=len(result.epoch_losses),
        final_loss=result.epoch_losses[-1] if result.epoch_losses else 0.0,
        wall_time=time.perf_counter() - started,
        epoch_losses=result.epoch_losses,
        extra=extra,
    )
    return scorer, report


def pseudolabel_target(
    extractor: FeatureExtractor,
    scorer: MLP,
    target: DatasetManifest,
    cfg: RunConfig,
    threads: int = 1,
    audit_path: Optional[Union[str, Path]] = None,
    tuples_path: Optional[Union[str, Path]] = None,
    diagnostics_path: Optional[Union[str, Path]] = None,
    header: Optional[str] = None,
) -> Tuple[PseudoLabelResult, StageReport]:
    """
    Étape C : pseudo-labels de la cible.

    Le manifeste cible est privé de ses poses avant tout traitement.

    Raises:
        StarvationError: Si aucun tuple ne peut être construit (le fichier d'audit est tout de même écrit)
    """
    started = time.perf_counter()
    result = pseudo_label_dataset(
        extractor,
        scorer,
        target.without_poses(),
        cfg.pseudolabel,
        cfg.consistency,
        cfg.correspondence,
        threads=threads,
        audit_path=audit_path,
        header=header,
    )
    if diagnostics_path is not None:
        write_pair_diagnostics(diagnostics_path, result.diagnostics)
    if tuples_path is not None:
        write_tuples(tuples_path, result.tuples, header)
    counts = Counter(label.decision.value for label in result.labels)
    report = StageReport(
        stage="pseudolabel",
        epochs=0,
        final_loss=0.0,
        wall_time=time.perf_counter() - started,
        checkpoint=str(tuples_path) if tuples_path is not None else None,
        extra={"labels": len(result.labels), "tuples": len(result.tuples), **counts},
    )
    return result, report


def ground_truth_tuples(
    extractor: FeatureExtractor,
    target: DatasetManifest,
    cfg: RunConfig,
    threads: int = 1,
    audit_path: Optional[Union[str, Path]] = None,
    tuples_path: Optional[Union[str, Path]] = None,
    header: Optional[str] = None,
) -> Tuple[List[TrainingTuple], StageReport]:
    """
    Tuples de vérité terrain de la cible, pour la comparaison supervisée.

    Les candidats sont les mêmes K plus proches voisins que pour les
    pseudo-labels, labellisés par distance entre poses. L'audit est écrit
    avant la construction des tuples.

    Raises:
        StarvationError: Si aucun tuple ne peut être construit
    """
    started = time.perf_counter()
    global_desc, _ = extract_all(extractor, target, threads)
    labels = labels_from_poses(target, cfg.labeling, cfg.pseudolabel, global_desc)
    if audit_path is not None:
        write_audit(audit_path, labels, header)
    tuples = build_tuples(labels)
    if tuples_path is not None:
        write_tuples(tuples_path, tuples, header)
    counts = Counter(label.decision.value for label in labels)
    anchors = {label.anchor_id for label in labels}
    report = StageReport(
        stage="pseudolabel",
        epochs=0,
        final_loss=0.0,
        wall_time=time.perf_counter() - started,
        checkpoint=str(tuples_path) if tuples_path is not None else None,
        extra={
            "labels": len(labels),
            "tuples": len(tuples),
            "starved_anchors": len(anchors) - len(tuples),
            "ground_truth": True,
            **counts,
        },
    )
    return tuples, report


def retrain_target(
    extractor: FeatureExtractor,
    tuples: Sequence[TrainingTuple],
    target: DatasetManifest,
    cfg: RunConfig,
    rng: Optional[np.random.Generator] = None,
    threads: int = 1,
) -> Tuple[FeatureExtractor, StageReport]:
    """
    Étape D : ré-entraînement sur les tuples de la cible.

    Seuls l'encodeur et la tête globale sont mis à jour ; la tête locale et
    le classifieur sont laissés de côté. Pour chaque tuple, un positif est
    tiré au hasard et le négatif le plus dur est choisi dans sa liste.

    Args:
        extractor: Extracteur issu de la source (non modifié)
        tuples: Tuples d'entraînement
        target: Jeu cible ; ses poses ne sont pas lues
        cfg: Configuration de l'exécution
        rng: Générateur de l'étape
        threads: Nombre de fils pour l'extraction

    Returns:
        (extracteur adapté, compte rendu)

    Raises:
        StarvationError: Si la liste de tuples est vide
    """
    started = time.perf_counter()
    if not tuples:
        raise StarvationError("Aucun tuple pour le ré-entraînement")
    rng = rng if rng is not None else stage_rng(cfg.seed, "retrain")
    optim = cfg.scaled("retrain")
    target = target.without_poses()
    extractor = extractor.copy()
    extractor.zero_grad()
    params = extractor.parameters(train_local=False)
    steps_per_epoch = math.ceil(len(tuples) / optim.batch_size)

    epoch_losses: List[float] = []
    step = 0
    for epoch in range(optim.epochs):
        order = rng.permutation(len(tuples))
        total = 0.0
        for start in range(0, order.size, optim.batch_size):
            batch = [tuples[k] for k in order[start : start + optim.batch_size]]
            members: Dict[str, int] = {}
            picks = []
            for item in batch:
                positive = item.positive_ids[int(rng.integers(len(item.positive_ids)))]
                k = min(cfg.training.negatives_per_anchor, len(item.negative_ids))
                chosen = np.sort(rng.choice(len(item.negative_ids), size=k, replace=False))
                negatives = [item.negative_ids[c] for c in chosen]
                picks.append((item.anchor_id, positive, negatives))
                for scan_id in (item.anchor_id, positive, *negatives):
                    members.setdefault(scan_id, len(members))

            clouds = [
                augment_cloud(target.cloud(target.index_of(scan_id)), None, rng, cfg.training)[0]
                for scan_id in members
            ]
            outputs = _forward_many(extractor, clouds, threads)
            grads = [np.zeros_like(g) for g, _, _ in outputs]
            n = float(len(picks))
            loss = 0.0
            for anchor_id, positive, negatives in picks:
                a, p = members[anchor_id], members[positive]
                neg = _hardest(outputs[a][0], outputs, [members[s] for s in negatives])
                triplet = triplet_loss(outputs[a][0], outputs[p][0], outputs[neg][0], cfg.triplet)
                loss += triplet.loss
                grads[a] += triplet.grad_anc / n
                grads[p] += triplet.grad_pos / n
                grads[neg] += triplet.grad_neg / n
            for (_, _, cache), g in zip(outputs, grads):
                extractor.backward(cache, grad_global=g)
            sgd_step(params, optim, step, steps_per_epoch)
            step += 1
            total += loss
        epoch_losses.append(total / len(tuples))
        logger.info("Ré-entraînement époque %d/%d : perte %.5f", epoch + 1, optim.epochs, epoch_losses[-1])

    report = StageReport(
        stage="retrain",
        epochs=optim.epochs,
        final_loss=epoch_losses[-1] if epoch_losses else 0.0,
        wall_time=time.perf_counter() - started,
        epoch_losses=epoch_losses,
        extra={"tuples": len(tuples), "steps": step},
    )
    return extractor, report
