"""
Orchestration des quatre étapes de l'adaptation dans un répertoire d'exécution.

Chaque étape écrit son artefact (checkpoint ou tuples) dans le répertoire
d'exécution ; une exécution relancée reprend à la première étape dont
l'artefact manque.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Tuple, TypeVar, Union

from geoadapt.core.config import RunConfig, artifact_header, checkpoint_metadata, write_run_config
from geoadapt.core.datasets import DatasetManifest
from geoadapt.core.default.disk_store import DiskStore
from geoadapt.core.default.paths import (
    ADAPTED_CHECKPOINT,
    AUDIT_FILE,
    DIAGNOSTICS_FILE,
    GCC_CHECKPOINT,
    PRETRAIN_CHECKPOINT,
    RUN_LOG_FILE,
    STAGE_REPORTS_FILE,
    TUPLES_FILE,
)
from geoadapt.core.default.steps import (
    ground_truth_tuples,
    pretrain_source,
    pseudolabel_target,
    retrain_target,
    train_gcc_stage,
)
from geoadapt.core.errors import DataError, StageError
from geoadapt.core.features import FeatureExtractor
from geoadapt.core.pseudolabel import TrainingTuple, read_tuples
from geoadapt.core.stage_report import StageReport, StageReportLog
from geoadapt.core.tinynet import MLP, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

SCORER_SECTION = "gcc_scorer"

T = TypeVar("T")


def load_extractor(path: Union[str, Path], cfg: RunConfig) -> Tuple[FeatureExtractor, Optional[MLP]]:
    """
    Lit un checkpoint d'extracteur, avec son classifieur s'il en contient un.

    Raises:
        DataError: Fichier absent
        ParseError: Contenu invalide
    """
    sections, _ = load_checkpoint(path)
    scorer = sections.pop(SCORER_SECTION, None)
    return FeatureExtractor.from_sections(sections, cfg.features), scorer


def save_extractor(
    path: Union[str, Path],
    extractor: FeatureExtractor,
    cfg: RunConfig,
    scorer: Optional[MLP] = None,
) -> Path:
    sections = dict(extractor.sections())
    if scorer is not None:
        sections[SCORER_SECTION] = scorer
    return save_checkpoint(path, sections, checkpoint_metadata(cfg))


@dataclass
class PipelineResult:
    checkpoint: Path
    reports: List[StageReport] = field(default_factory=list)


class GeoAdaptPipeline:
    """
    Enchaîne le pré-entraînement, le classifieur, les pseudo-labels et le
    ré-entraînement, en conservant les artefacts de chaque étape.
    """

    def __init__(self, store: DiskStore, config: RunConfig, threads: int = 1):
        """
        Args:
            store: Le stockage du répertoire d'exécution
            config: La configuration résolue
            threads: Nombre de fils pour l'extraction et l'étiquetage
        """
        self.store = store
        self.config = config
        self.threads = max(1, threads)
        self.report_log = StageReportLog()

    @classmethod
    def with_default_config(
        cls, path: Union[str, Path], config: Optional[RunConfig] = None, threads: int = 1
    ) -> "GeoAdaptPipeline":
        """
        Crée un pipeline sur un répertoire d'exécution.

        Args:
            path: Le répertoire d'exécution
            config: Configuration (défauts si absente)
            threads: Nombre de fils
        """
        return cls(DiskStore(path), config or RunConfig(), threads)

    @property
    def header(self) -> str:
        return artifact_header(self.config, "geoadapt")

    def _run_stage(self, stage: str, action: Callable[[], T]) -> T:
        try:
            return action()
        except StageError:
            raise
        except Exception as error:
            self.store.log(RUN_LOG_FILE, f"échec de l'étape {stage} : {error}")
            raise StageError(stage, error) from error

    def _record(self, report: StageReport, artifact: Optional[str] = None) -> None:
        if artifact is not None:
            report.checkpoint = str(self.store.path / artifact)
        self.report_log.update_log(report)
        self.store.log(RUN_LOG_FILE, report.to_json())
        self.store[f"logs/{STAGE_REPORTS_FILE}"] = self.report_log.format_log()

    def pretrain(self, source: DatasetManifest, extractor: Optional[FeatureExtractor] = None) -> FeatureExtractor:
        """Étape A ; écrit le checkpoint de pré-entraînement."""
        cfg = self.config
        initial = extractor or FeatureExtractor.build(cfg.features, seed=cfg.seed)
        trained, report = self._run_stage(
            "pretrain", lambda: pretrain_source(initial, source, cfg, threads=self.threads)
        )
        save_extractor(self.store.file(PRETRAIN_CHECKPOINT), trained, cfg)
        self._record(report, PRETRAIN_CHECKPOINT)
        return trained

    def train_gcc(self, source: DatasetManifest, extractor: FeatureExtractor) -> MLP:
        """Étape B ; écrit l'extracteur et le classifieur dans un même checkpoint."""
        cfg = self.config
        scorer, report = self._run_stage(
            "gcc", lambda: train_gcc_stage(extractor, source, cfg, threads=self.threads)
        )
        save_extractor(self.store.file(GCC_CHECKPOINT), extractor, cfg, scorer)
        self._record(report, GCC_CHECKPOINT)
        return scorer

    def pseudolabel(
        self, extractor: FeatureExtractor, scorer: MLP, target: DatasetManifest
    ) -> List[TrainingTuple]:
        """Étape C ; écrit les tuples, l'audit et les diagnostics de paires."""
        cfg = self.config
        if cfg.training.use_ground_truth_tuples:
            logger.info("Tuples de vérité terrain utilisés à la place des pseudo-labels")
            tuples, report = self._run_stage(
                "pseudolabel",
                lambda: ground_truth_tuples(
                    extractor,
                    target,
                    cfg,
                    self.threads,
                    audit_path=self.store.file(AUDIT_FILE),
                    tuples_path=self.store.file(TUPLES_FILE),
                    header=self.header,
                ),
            )
            self._record(report, TUPLES_FILE)
            return tuples
        result, report = self._run_stage(
            "pseudolabel",
            lambda: pseudolabel_target(
                extractor,
                scorer,
                target,
                cfg,
                threads=self.threads,
                audit_path=self.store.file(AUDIT_FILE),
                tuples_path=self.store.file(TUPLES_FILE),
                diagnostics_path=self.store.file(DIAGNOSTICS_FILE),
                header=self.header,
            ),
        )
        self._record(report, TUPLES_FILE)
        return result.tuples

    def adapt(
        self,
        extractor: FeatureExtractor,
        tuples: List[TrainingTuple],
        target: DatasetManifest,
        scorer: Optional[MLP] = None,
    ) -> FeatureExtractor:
        """Étape D ; écrit le checkpoint adapté."""
        cfg = self.config
        adapted, report = self._run_stage(
            "retrain", lambda: retrain_target(extractor, tuples, target, cfg, threads=self.threads)
        )
        save_extractor(self.store.file(ADAPTED_CHECKPOINT), adapted, cfg, scorer)
        self._record(report, ADAPTED_CHECKPOINT)
        return adapted

    def run(self, source: Optional[DatasetManifest], target: DatasetManifest, resume: bool = True) -> PipelineResult:
        """
        Exécute les étapes A à D, en reprenant depuis les artefacts présents.

        Args:
            source: Jeu source avec poses ; peut être None si les étapes A et B sont déjà faites
            target: Jeu cible ; ses poses ne sont lues que pour les tuples de vérité terrain
            resume: Reprendre depuis les artefacts existants

        Returns:
            Le checkpoint final et les comptes rendus des étapes exécutées

        Raises:
            StageError: Échec d'une étape, avec son nom et sa cause
        """
        cfg = self.config
        if not resume:
            self.store.archive_logs()
        write_run_config(cfg, self.store.path)

        def require_source() -> DatasetManifest:
            if source is None:
                raise DataError("Un jeu source est nécessaire pour les étapes A et B")
            return source

        if resume and GCC_CHECKPOINT in self.store:
            logger.info("Reprise depuis %s", GCC_CHECKPOINT)
            extractor, scorer = self._run_stage(
                "gcc", lambda: load_extractor(self.store.require(GCC_CHECKPOINT), cfg)
            )
            if scorer is None:
                raise StageError("gcc", DataError(f"{GCC_CHECKPOINT} ne contient pas de classifieur"))
        else:
            if resume and PRETRAIN_CHECKPOINT in self.store:
                logger.info("Reprise depuis %s", PRETRAIN_CHECKPOINT)
                extractor, _ = self._run_stage(
                    "pretrain", lambda: load_extractor(self.store.require(PRETRAIN_CHECKPOINT), cfg)
                )
            else:
                extractor = self.pretrain(self._run_stage("pretrain", require_source))
            scorer = self.train_gcc(self._run_stage("gcc", require_source), extractor)

        if resume and TUPLES_FILE in self.store:
            logger.info("Reprise depuis %s", TUPLES_FILE)
            tuples = self._run_stage("pseudolabel", lambda: read_tuples(self.store.require(TUPLES_FILE)))
        else:
            tuples = self.pseudolabel(extractor, scorer, target)

        self.adapt(extractor, tuples, target, scorer)
        return PipelineResult(self.store.path / ADAPTED_CHECKPOINT, list(self.report_log.log()))


def run_pipeline(
    source: Optional[DatasetManifest],
    target: DatasetManifest,
    config: RunConfig,
    out: Union[str, Path],
    threads: int = 1,
    resume: bool = True,
) -> PipelineResult:
    """Exécute le pipeline complet dans le répertoire `out`."""
    return GeoAdaptPipeline.with_default_config(out, config, threads).run(source, target, resume)
