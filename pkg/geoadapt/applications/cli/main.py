"""
Point d'entrée de l'outil en ligne de commande GeoAdapt.

Chaque étape de l'adaptation est exposée comme une sous-commande :
- simuler un couple de jeux source et cible,
- pré-entraîner sur la source puis entraîner le classifieur,
- générer les pseudo-labels et adapter sur la cible,
- évaluer, balayer une ablation et tracer les résultats.

Toutes les commandes affichent la configuration résolue et la graine, et
sortent avec un code propre à la catégorie d'erreur rencontrée.
"""

import contextlib
import json
import logging
import os
from dataclasses import replace
from pathlib import Path
from typing import Iterator, List, Optional

import typer
from dotenv import load_dotenv
from rich.console import Console
from rich.table import Table
from termcolor import colored

from geoadapt.core.config import (
    RunConfig,
    artifact_header,
    config_table_rows,
    load_run_config,
    write_run_config,
)
from geoadapt.core.datasets import read_manifest, write_manifest
from geoadapt.core.default.ablation import ablation_sweep
from geoadapt.core.default.disk_store import DiskStore
from geoadapt.core.default.paths import (
    ADAPTED_CHECKPOINT,
    GCC_CHECKPOINT,
    METRICS_JSON,
    POSITIVE_DISTANCE_HISTOGRAM,
    PR_CURVE_FILE,
    RECALL_TABLE,
    SEPARABILITY_HISTOGRAM,
    SOURCE_DATASET_DIR,
    TARGET_DATASET_DIR,
)
from geoadapt.core.default.pipeline import GeoAdaptPipeline, load_extractor, run_pipeline
from geoadapt.core.errors import DataError, GeoAdaptError
from geoadapt.core.evaluation import (
    evaluate_extractor,
    positive_distance_histogram,
    separability_histogram,
    write_histogram,
    write_pr_curve,
    write_table,
)
from geoadapt.core.pseudolabel import read_tuples
from geoadapt.core.simulator import shift_domain, simulate_world
from geoadapt.tools.plotting import render_directory

app = typer.Typer(
    context_settings={"help_option_names": ["-h", "--help"]},
    help="GeoAdapt : adaptation au moment du test pour la reconnaissance de lieux LiDAR.",
)

logger = logging.getLogger(__name__)

EXIT_CODES = {"config": 2, "data": 3, "numeric": 4, "starvation": 5}

CONFIG_OPTION = typer.Option(None, "--config", "-c", help="Fichier de configuration `clé = valeur`.")
SEED_OPTION = typer.Option(None, "--seed", "-s", help="Graine, prioritaire sur la configuration.")
OUT_OPTION = typer.Option(Path("run"), "--out", "-o", help="Répertoire de sortie.")
THREADS_OPTION = typer.Option(
    None, "--threads", "-t", envvar="GEOADAPT_THREADS", help="Nombre de fils (défaut : GEOADAPT_THREADS ou 1)."
)
VERBOSE_OPTION = typer.Option(False, "--verbose", "-v", help="Activer la journalisation verbeuse pour le débogage.")


def load_env_if_needed() -> None:
    """
    Charge un fichier .env du répertoire courant si GEOADAPT_THREADS n'est pas défini.
    """
    if os.getenv("GEOADAPT_THREADS") is None:
        load_dotenv()
    if os.getenv("GEOADAPT_THREADS") is None:
        load_dotenv(dotenv_path=os.path.join(os.getcwd(), ".env"))


@app.callback()
def callback():
    load_env_if_needed()


def print_config(cfg: RunConfig) -> None:
    """Affiche la configuration résolue et la graine."""
    table = Table(title="Configuration résolue", show_lines=False)
    table.add_column("clé")
    table.add_column("valeur")
    for key, value in config_table_rows(cfg):
        table.add_row(key, value)
    Console().print(table)
    print(colored("Graine :", "green"), cfg.seed)


def setup(
    config: Optional[Path],
    seed: Optional[int],
    threads: Optional[int],
    verbose: bool,
    out: Optional[Path] = None,
) -> RunConfig:
    """
    Configure la journalisation, charge la configuration et l'écrit dans le répertoire de sortie.

    Returns:
        La configuration résolue
    """
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO)
    overrides = {} if seed is None else {"training.seed": seed, "simulation.seed": seed}
    cfg = load_run_config(config, overrides)
    print_config(cfg)
    if threads is not None:
        print(colored("Fils :", "green"), threads)
    if out is not None:
        write_run_config(cfg, out)
    return cfg


def resolve_threads(threads: Optional[int]) -> int:
    return max(1, threads or 1)


@contextlib.contextmanager
def exit_on_error() -> Iterator[None]:
    """Traduit les erreurs en message coloré et en code de sortie par catégorie."""
    try:
        yield
    except GeoAdaptError as error:
        print(colored(f"Erreur ({error.category}) : {error}", "red"))
        raise typer.Exit(code=EXIT_CODES.get(error.category, 1))


def require_path(path: Path, what: str) -> Path:
    if not path.exists():
        raise DataError(f"{what} introuvable : {path}")
    return path


@app.command(help="Simule un jeu source et un jeu cible décalé.")
def simulate(
    config: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Path = OUT_OPTION,
    threads: Optional[int] = THREADS_OPTION,
    verbose: bool = VERBOSE_OPTION,
):
    with exit_on_error():
        cfg = setup(config, seed, threads, verbose, out)
        header = artifact_header(cfg, "simulate")
        source_cfg = cfg.simulation
        target_cfg = replace(shift_domain(source_cfg, cfg.shift), name=f"{source_cfg.name}-target")
        write_manifest(simulate_world(source_cfg), out / SOURCE_DATASET_DIR, header)
        write_manifest(simulate_world(target_cfg), out / TARGET_DATASET_DIR, header)
        print(colored("Jeux écrits dans", "green"), out.absolute())


@app.command(help="Étape A : pré-entraînement supervisé sur la source.")
def pretrain(
    source: Path = typer.Option(..., "--source", help="Manifeste source (avec poses)."),
    config: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Path = OUT_OPTION,
    threads: Optional[int] = THREADS_OPTION,
    verbose: bool = VERBOSE_OPTION,
):
    with exit_on_error():
        cfg = setup(config, seed, threads, verbose, out)
        pipeline = GeoAdaptPipeline(DiskStore(out), cfg, resolve_threads(threads))
        pipeline.pretrain(read_manifest(require_path(source, "Manifeste source")))
        print(colored("Checkpoint écrit dans", "green"), out.absolute())


@app.command("train-gcc", help="Étape B : entraînement du classifieur de cohérence géométrique.")
def train_gcc(
    source: Path = typer.Option(..., "--source", help="Manifeste source (avec poses)."),
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Checkpoint pré-entraîné."),
    config: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Path = OUT_OPTION,
    threads: Optional[int] = THREADS_OPTION,
    verbose: bool = VERBOSE_OPTION,
):
    with exit_on_error():
        cfg = setup(config, seed, threads, verbose, out)
        extractor, _ = load_extractor(checkpoint, cfg)
        pipeline = GeoAdaptPipeline(DiskStore(out), cfg, resolve_threads(threads))
        pipeline.train_gcc(read_manifest(require_path(source, "Manifeste source")), extractor)
        print(colored("Checkpoint écrit dans", "green"), out / GCC_CHECKPOINT)


@app.command(help="Étape C : pseudo-labels de la cible (ses poses ne sont pas lues).")
def pseudolabel(
    target: Path = typer.Option(..., "--target", help="Manifeste cible."),
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Checkpoint contenant le classifieur."),
    config: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Path = OUT_OPTION,
    threads: Optional[int] = THREADS_OPTION,
    verbose: bool = VERBOSE_OPTION,
):
    with exit_on_error():
        cfg = setup(config, seed, threads, verbose, out)
        extractor, scorer = load_extractor(checkpoint, cfg)
        if scorer is None:
            raise DataError(f"Le checkpoint {checkpoint} ne contient pas de classifieur")
        manifest = read_manifest(require_path(target, "Manifeste cible"), with_poses=cfg.training.use_ground_truth_tuples)
        pipeline = GeoAdaptPipeline(DiskStore(out), cfg, resolve_threads(threads))
        tuples = pipeline.pseudolabel(extractor, scorer, manifest)
        print(colored(f"{len(tuples)} tuples écrits dans", "green"), out.absolute())


@app.command(help="Étape D : ré-entraînement de l'encodeur et de la tête globale.")
def adapt(
    target: Path = typer.Option(..., "--target", help="Manifeste cible."),
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Checkpoint de départ."),
    tuples: Path = typer.Option(..., "--tuples", help="Fichier de tuples."),
    config: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Path = OUT_OPTION,
    threads: Optional[int] = THREADS_OPTION,
    verbose: bool = VERBOSE_OPTION,
):
    with exit_on_error():
        cfg = setup(config, seed, threads, verbose, out)
        extractor, scorer = load_extractor(checkpoint, cfg)
        training_tuples = read_tuples(require_path(tuples, "Fichier de tuples"))
        manifest = read_manifest(require_path(target, "Manifeste cible"), with_poses=False)
        pipeline = GeoAdaptPipeline(DiskStore(out), cfg, resolve_threads(threads))
        pipeline.adapt(extractor, training_tuples, manifest, scorer)
        print(colored("Checkpoint adapté écrit dans", "green"), out / ADAPTED_CHECKPOINT)


@app.command(help="Enchaîne les étapes A à D, en reprenant depuis les artefacts présents.")
def run(
    source: Path = typer.Option(..., "--source", help="Manifeste source (avec poses)."),
    target: Path = typer.Option(..., "--target", help="Manifeste cible."),
    fresh: bool = typer.Option(False, "--fresh", help="Ignorer les artefacts existants."),
    config: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Path = OUT_OPTION,
    threads: Optional[int] = THREADS_OPTION,
    verbose: bool = VERBOSE_OPTION,
):
    with exit_on_error():
        cfg = setup(config, seed, threads, verbose, out)
        result = run_pipeline(
            read_manifest(require_path(source, "Manifeste source")),
            read_manifest(require_path(target, "Manifeste cible"), with_poses=cfg.training.use_ground_truth_tuples),
            cfg,
            out,
            resolve_threads(threads),
            resume=not fresh,
        )
        print(colored("Checkpoint final :", "green"), result.checkpoint)


@app.command(help="Évalue un checkpoint : Recall@N, courbe précision-rappel et histogrammes.")
def evaluate(
    checkpoint: Path = typer.Option(..., "--checkpoint", help="Checkpoint évalué."),
    target: Optional[Path] = typer.Option(None, "--target", help="Manifeste avec splits query et database."),
    query: Optional[Path] = typer.Option(None, "--query", help="Manifeste des requêtes."),
    database: Optional[Path] = typer.Option(None, "--database", help="Manifeste de la base."),
    tuples: Optional[Path] = typer.Option(None, "--tuples", help="Tuples dont tracer les distances positives."),
    config: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Path = OUT_OPTION,
    threads: Optional[int] = THREADS_OPTION,
    verbose: bool = VERBOSE_OPTION,
):
    with exit_on_error():
        cfg = setup(config, seed, threads, verbose, out)
        n_threads = resolve_threads(threads)
        extractor, _ = load_extractor(checkpoint, cfg)
        if target is not None:
            manifest, db_manifest = read_manifest(require_path(target, "Manifeste cible")), None
        elif query is not None and database is not None:
            manifest = read_manifest(require_path(query, "Manifeste des requêtes"))
            db_manifest = read_manifest(require_path(database, "Manifeste de la base"))
        else:
            raise DataError("--target, ou --query et --database, sont requis")

        header = artifact_header(cfg, "evaluate")
        evaluation = evaluate_extractor(extractor, manifest, cfg.eval, n_threads, db_manifest)
        rows = [{"n": key, "recall": value} for key, value in evaluation.recall.recalls.items()]
        write_table(out / RECALL_TABLE, rows, header)
        write_pr_curve(out / PR_CURVE_FILE, evaluation.curve, header)

        scans = evaluation.all_scans()
        histogram = separability_histogram(scans, cfg.labeling, cfg.eval.histogram_bins)
        write_histogram(
            out / SEPARABILITY_HISTOGRAM,
            histogram.edges,
            {"positive": histogram.positive, "negative": histogram.negative},
            header,
        )
        metrics = {
            "recall": evaluation.recall.to_dict(),
            "pr_auc": evaluation.curve.auc,
            "separability_overlap": histogram.overlap,
        }
        if tuples is not None:
            poses = dict(zip(scans.ids, scans.require_poses()))
            positives = positive_distance_histogram(
                read_tuples(require_path(tuples, "Fichier de tuples")),
                poses,
                cfg.labeling.t_pos,
                cfg.eval.histogram_bins,
            )
            write_histogram(out / POSITIVE_DISTANCE_HISTOGRAM, positives.edges, {"count": positives.counts}, header)
            metrics["positive_fraction_beyond_t_pos"] = positives.fraction_beyond
        DiskStore(out)[METRICS_JSON] = json.dumps(
            {"header": header, "metrics": metrics}, sort_keys=True, indent=2
        )
        for key, value in evaluation.recall.recalls.items():
            print(colored(f"Recall@{key} :", "green"), f"{value:.2f}")
        print(colored("PR-AUC :", "green"), f"{evaluation.curve.auc:.4f}")


@app.command(help="Balaye un paramètre (sort, scale, normalization, alpha_pos, alpha_neg).")
def ablate(
    source: Path = typer.Option(..., "--source", help="Manifeste source (avec poses)."),
    target: Path = typer.Option(..., "--target", help="Manifeste cible (poses pour l'évaluation)."),
    axis: str = typer.Option(..., "--axis", help="Paramètre balayé."),
    grid: str = typer.Option(..., "--grid", help="Valeurs séparées par des virgules."),
    config: Optional[Path] = CONFIG_OPTION,
    seed: Optional[int] = SEED_OPTION,
    out: Path = OUT_OPTION,
    threads: Optional[int] = THREADS_OPTION,
    verbose: bool = VERBOSE_OPTION,
):
    with exit_on_error():
        cfg = setup(config, seed, threads, verbose, out)
        values: List[str] = [value.strip() for value in grid.split(",") if value.strip()]
        rows = ablation_sweep(
            read_manifest(require_path(source, "Manifeste source")),
            read_manifest(require_path(target, "Manifeste cible")),
            cfg,
            axis,
            values,
            out,
            resolve_threads(threads),
        )
        for row in rows:
            print(colored(f"{axis}={row[axis]} :", "green"), row.get("status"), row.get("recall@1", ""))


@app.command(help="Trace en PNG les sorties d'une évaluation.")
def plot(
    input_dir: Path = typer.Option(..., "--input", help="Répertoire d'une évaluation."),
    out: Path = OUT_OPTION,
    verbose: bool = VERBOSE_OPTION,
):
    with exit_on_error():
        logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO)
        for image in render_directory(require_path(input_dir, "Répertoire d'évaluation"), out):
            print(colored("Figure :", "green"), image)


if __name__ == "__main__":
    app()
