"""
Réseau minimal entraînable de GeoAdapt.

Ce module fournit des perceptrons multicouches à gradients analytiques, le
pooling GeM, les trois fonctions de perte utilisées par l'adaptation (triplet,
contrastive « hardest », entropie croisée binaire), une descente de gradient
stochastique avec planifications par paliers ou cosinus, et le format de
checkpoint binaire.

Les paramètres sont conservés sur la grille des réels 32 bits : ils sont
arrondis en float32 après chaque mise à jour, les calculs se faisant en float64.
Un checkpoint relu reproduit donc exactement le modèle en mémoire.
"""

from __future__ import annotations

import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from geoadapt.core.errors import DataError, NumericError, ParseError, StateError, ValidationError

logger = logging.getLogger(__name__)

HIDDEN_ACTIVATIONS = ("relu", "identity")
OUTPUT_ACTIVATIONS = ("sigmoid", "identity")

BCE_EPS = 1e-7
GEM_EPS = 1e-6

CHECKPOINT_MAGIC = b"GEOA"
CHECKPOINT_VERSION = 1


def to_float32_grid(values) -> np.ndarray:
    """Arrondit des valeurs sur la grille float32 et les rend en float64."""
    return np.asarray(values, dtype=np.float32).astype(np.float64)


@dataclass(eq=False)
class ParamTensor:
    """
    Un tenseur de paramètres et son gradient accumulé.

    Attributes:
        name: Nom du paramètre (utilisé dans les messages et les checkpoints)
        value: Valeurs, matrice (lignes, colonnes)
        grad: Gradient de même forme que `value`
    """

    name: str
    value: np.ndarray
    grad: Optional[np.ndarray] = None
    velocity: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        value = to_float32_grid(self.value)
        if value.ndim == 1:
            value = value.reshape(1, -1)
        if value.ndim != 2:
            raise ValidationError(f"Le paramètre {self.name} doit être une matrice")
        if not np.all(np.isfinite(value)):
            raise NumericError(f"Le paramètre {self.name} contient des valeurs non finies")
        self.value = value
        self.grad = np.zeros_like(value)

    @property
    def shape(self) -> Tuple[int, int]:
        return tuple(self.value.shape)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.value)


@dataclass(eq=False)
class DenseLayer:
    """Couche affine y = x·W + b suivie d'une activation (relu ou identité)."""

    weight: ParamTensor
    bias: ParamTensor
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in HIDDEN_ACTIVATIONS:
            raise ValidationError(f"Activation inconnue : {self.activation}")
        if self.bias.shape != (1, self.weight.shape[1]):
            raise ValidationError(
                f"Biais de forme {self.bias.shape} incompatible avec le poids {self.weight.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]


@dataclass
class ForwardCache:
    """Valeurs intermédiaires d'une passe avant, nécessaires à la rétropropagation."""

    inputs: List[np.ndarray]
    pre_activations: List[np.ndarray]
    output: np.ndarray
    vector_input: bool


class MLP:
    """
    Perceptron multicouche à gradients analytiques.

    Les couches cachées appliquent leur activation, puis l'activation de sortie
    (sigmoïde ou identité) est appliquée au résultat de la dernière couche.
    """

    def __init__(
        self,
        layers: Sequence[DenseLayer],
        output_activation: str = "identity",
        name: str = "mlp",
    ):
        if not layers:
            raise ValidationError("Un MLP nécessite au moins une couche")
        if output_activation not in OUTPUT_ACTIVATIONS:
            raise ValidationError(f"Activation de sortie inconnue : {output_activation}")
        for previous, current in zip(layers[:-1], layers[1:]):
            if previous.out_dim != current.in_dim:
                raise ValidationError(
                    f"Dimensions incompatibles entre couches : {previous.out_dim} -> {current.in_dim}"
                )
        self.layers = list(layers)
        self.output_activation = output_activation
        self.name = name
        self._last_cache: Optional[ForwardCache] = None

    @classmethod
    def build(
        cls,
        dims: Sequence[int],
        hidden_activation: str = "relu",
        output_activation: str = "identity",
        seed: int = 0,
        init: str = "glorot",
        name: str = "mlp",
    ) -> "MLP":
        """
        Construit un MLP initialisé de façon déterministe.

        Args:
            dims: Dimensions successives, entrée comprise (ex. [12, 32, 16])
            hidden_activation: Activation des couches cachées
            output_activation: Activation appliquée en sortie
            seed: Graine de l'initialisation
            init: "glorot" (uniforme ±sqrt(6/(fan_in+fan_out))) ou "zeros"
            name: Nom du réseau

        Returns:
            Le MLP construit
        """
        if len(dims) < 2:
            raise ValidationError("dims doit contenir au moins une entrée et une sortie")
        rng = np.random.default_rng(seed)
        layers = []
        n_layers = len(dims) - 1
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            if init == "zeros":
                weight = np.zeros((fan_in, fan_out))
            elif init == "glorot":
                limit = math.sqrt(6.0 / (fan_in + fan_out))
                weight = to_float32_grid(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            else:
                raise ValidationError(f"Initialisation inconnue : {init}")
            activation = hidden_activation if i < n_layers - 1 else "identity"
            layers.append(
                DenseLayer(
                    ParamTensor(f"{name}.{i}.weight", weight),
                    ParamTensor(f"{name}.{i}.bias", np.zeros((1, fan_out))),
                    activation,
                )
            )
        return cls(layers, output_activation=output_activation, name=name)

    @classmethod
    def from_arrays(
        cls,
        specs: Sequence[Tuple[np.ndarray, np.ndarray, str]],
        output_activation: str = "identity",
        name: str = "mlp",
    ) -> "MLP":
        """Construit un MLP à partir de triplets (poids, biais, activation)."""
        layers = [
            DenseLayer(
                ParamTensor(f"{name}.{i}.weight", np.asarray(w, dtype=np.float64).reshape(len(np.atleast_2d(w)), -1)),
                ParamTensor(f"{name}.{i}.bias", np.asarray(b, dtype=np.float64).reshape(1, -1)),
                activation,
            )
            for i, (w, b, activation) in enumerate(specs)
        ]
        return cls(layers, output_activation=output_activation, name=name)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> List[ParamTensor]:
        params = []
        for layer in self.layers:
            params.extend([layer.weight, layer.bias])
        return params

    def zero_grad(self) -> None:
        for param in self.parameters():
            param.zero_grad()

    def copy(self) -> "MLP":
        specs = [
            (layer.weight.value.copy(), layer.bias.value.copy(), layer.activation)
            for layer in self.layers
        ]
        return MLP.from_arrays(specs, output_activation=self.output_activation, name=self.name)

    def _run(self, x) -> ForwardCache:
        x = np.asarray(x, dtype=np.float64)
        vector_input = x.ndim == 1
        h = x.reshape(1, -1) if vector_input else x
        if h.ndim != 2 or h.shape[1] != self.input_dim:
            raise ValidationError(
                f"{self.name} attend une entrée de dimension {self.input_dim}, reçu {x.shape}"
            )
        inputs, pre_activations = [], []
        for layer in self.layers:
            inputs.append(h)
            z = h @ layer.weight.value + layer.bias.value
            pre_activations.append(z)
            h = np.maximum(z, 0.0) if layer.activation == "relu" else z
        if self.output_activation == "sigmoid":
            h = expit(h)
        return ForwardCache(inputs, pre_activations, h, vector_input)

    def forward(self, x, keep_cache: bool = True) -> np.ndarray:
        """
        Passe avant sur un vecteur ou un lot de vecteurs (une ligne par échantillon).

        Args:
            x: Entrée de dimension `input_dim`, ou matrice (n, input_dim)
            keep_cache: Conserver la passe pour un appel ultérieur à `backward`

        Returns:
            La sortie, de même rang que l'entrée
        """
        cache = self._run(x)
        if keep_cache:
            self._last_cache = cache
        return cache.output[0] if cache.vector_input else cache.output

    def forward_train(self, x) -> Tuple[np.ndarray, ForwardCache]:
        """Passe avant renvoyant explicitement son cache (plusieurs passes en vol)."""
        cache = self._run(x)
        output = cache.output[0] if cache.vector_input else cache.output
        return output, cache

    def backward(self, upstream, cache: Optional[ForwardCache] = None) -> np.ndarray:
        """
        Rétropropage un gradient amont et accumule les gradients des paramètres.

        Args:
            upstream: Gradient de la perte par rapport à la sortie
            cache: Cache d'une passe avant ; à défaut, la dernière passe `forward`

        Returns:
            Le gradient par rapport à l'entrée

        Raises:
            StateError: Si aucune passe avant n'est disponible
        """
        cache = cache if cache is not None else self._last_cache
        if cache is None:
            raise StateError(f"{self.name} : rétropropagation sans passe avant")
        g = np.asarray(upstream, dtype=np.float64)
        g = g.reshape(cache.output.shape)
        if self.output_activation == "sigmoid":
            g = g * cache.output * (1.0 - cache.output)
        for layer, h, z in zip(
            reversed(self.layers), reversed(cache.inputs), reversed(cache.pre_activations)
        ):
            if layer.activation == "relu":
                g = g * (z > 0.0)
            layer.weight.grad += h.T @ g
            layer.bias.grad += g.sum(axis=0, keepdims=True)
            g = g @ layer.weight.value.T
        return g[0] if cache.vector_input else g


def mlp_forward(net: MLP, x) -> np.ndarray:
    """Passe avant fonctionnelle (conserve le cache pour `mlp_backward`)."""
    return net.forward(x)


def mlp_backward(net: MLP, x, upstream) -> np.ndarray:
    """
    Rétropropagation fonctionnelle après `mlp_forward` sur la même entrée.

    Raises:
        StateError: Si aucune passe avant n'a précédé l'appel, ou si elle portait sur une autre entrée
    """
    cache = net._last_cache
    if cache is None:
        raise StateError(f"{net.name} : rétropropagation sans passe avant")
    h = np.asarray(x, dtype=np.float64)
    if h.ndim == 1:
        h = h.reshape(1, -1)
    if h.shape != cache.inputs[0].shape or not np.array_equal(h, cache.inputs[0]):
        raise StateError(f"{net.name} : la dernière passe avant portait sur une autre entrée")
    return net.backward(upstream, cache)


def gem_pool(features, p: float = 3.0, eps: float = GEM_EPS) -> np.ndarray:
    """
    Pooling par moyenne généralisée : (moyenne_i x_ij^p)^(1/p) pour chaque dimension j.

    Les entrées sont bornées inférieurement à `eps`. La somme est faite sur des
    colonnes triées, ce qui rend le résultat exactement indépendant de l'ordre
    des points.

    Args:
        features: Matrice (n, d) de valeurs positives
        p: Exposant (≥ 1)
        eps: Borne inférieure appliquée aux valeurs

    Returns:
        Vecteur de dimension d
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[0] == 0:
        raise ValidationError("gem_pool : liste de descripteurs vide")
    if p < 1:
        raise ValidationError("gem_pool : l'exposant p doit être au moins 1")
    powered = np.sort(np.maximum(x, eps) ** p, axis=0)
    return powered.mean(axis=0) ** (1.0 / p)


def gem_pool_backward(features, p: float, upstream, eps: float = GEM_EPS) -> np.ndarray:
    """Gradient de `gem_pool` par rapport aux descripteurs d'entrée."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    clamped = np.maximum(x, eps)
    n = x.shape[0]
    mean = (np.sort(clamped ** p, axis=0)).mean(axis=0)
    scale = mean ** (1.0 / p - 1.0) / n
    grad = np.asarray(upstream, dtype=np.float64).reshape(1, -1) * scale * clamped ** (p - 1.0)
    return grad * (x > eps)


@dataclass
class TripletConfig:
    """Marge δ de la perte triplet."""

    margin: float = 0.2

    def __post_init__(self):
        if self.margin <= 0:
            raise ValidationError("La marge triplet doit être strictement positive")


@dataclass
class ContrastiveConfig:
    """Marges, poids et taille du sous-ensemble de minage de la perte contrastive."""

    m_p: float = 0.1
    m_n: float = 1.4
    lambda_n: float = 1.0
    mining_subset_size: int = 256

    def __post_init__(self):
        if self.mining_subset_size < 1:
            raise ValidationError("La taille du sous-ensemble de minage doit être au moins 1")
        if self.lambda_n < 0:
            raise ValidationError("lambda_n doit être positif ou nul")


@dataclass
class TripletResult:
    loss: float
    grad_anc: np.ndarray
    grad_pos: np.ndarray
    grad_neg: np.ndarray
    d_pos: float
    d_neg: float


def _unit(diff: np.ndarray, norm: float) -> np.ndarray:
    if norm <= 0.0:
        return np.zeros_like(diff)
    return diff / norm


def triplet_loss(g_anc, g_pos, g_neg, cfg: Optional[TripletConfig] = None) -> TripletResult:
    """
    Perte triplet [‖a−p‖ − ‖a−n‖ + δ]₊ et son sous-gradient exact.

    Args:
        g_anc: Descripteur global de l'ancre
        g_pos: Descripteur global du positif
        g_neg: Descripteur global du négatif
        cfg: Configuration (marge δ)

    Returns:
        La perte et les gradients par rapport aux trois entrées (nuls si inactive)
    """
    cfg = cfg or TripletConfig()
    a = np.asarray(g_anc, dtype=np.float64)
    p = np.asarray(g_pos, dtype=np.float64)
    n = np.asarray(g_neg, dtype=np.float64)
    if not (a.shape == p.shape == n.shape):
        raise ValidationError("triplet_loss : les trois vecteurs doivent avoir la même taille")
    d_pos = float(np.linalg.norm(a - p))
    d_neg = float(np.linalg.norm(a - n))
    value = d_pos - d_neg + cfg.margin
    zeros = np.zeros_like(a)
    if value <= 0.0:
        return TripletResult(0.0, zeros, zeros.copy(), zeros.copy(), d_pos, d_neg)
    u_pos = _unit(a - p, d_pos)
    u_neg = _unit(a - n, d_neg)
    return TripletResult(value, u_pos - u_neg, -u_pos, u_neg, d_pos, d_neg)


@dataclass
class ContrastiveResult:
    loss: float
    grad_a: np.ndarray
    grad_b: np.ndarray
    positive_term: float
    negative_terms: Tuple[float, float]


def _hardest_negatives(
    anchors: np.ndarray,
    pool: np.ndarray,
    subset: np.ndarray,
    excluded: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Indice (dans `pool`) et distance² du négatif le plus dur de chaque ancre.

    `excluded` a une ligne par ancre : les indices de `pool` à écarter pour elle.
    """
    if subset.size == 0:
        return np.full(anchors.shape[0], -1), np.full(anchors.shape[0], np.inf)
    diff = anchors[:, None, :] - pool[subset][None, :, :]
    sq = np.einsum("ijk,ijk->ij", diff, diff)
    sq[np.any(subset[None, :, None] == excluded[:, None, :], axis=2)] = np.inf
    best = np.argmin(sq, axis=1)
    best_sq = sq[np.arange(sq.shape[0]), best]
    best_index = np.where(np.isfinite(best_sq), subset[best], -1)
    return best_index, best_sq


def hardest_contrastive_loss(
    features_a,
    features_b,
    index_a,
    index_b,
    cfg: Optional[ContrastiveConfig] = None,
    rng: Optional[np.random.Generator] = None,
) -> ContrastiveResult:
    """
    Perte contrastive avec minage du négatif le plus dur, sur des correspondances.

    Pour chaque correspondance (i_a, i_b) : terme positif [‖l_a − l_b‖² − m_p]₊,
    plus deux termes négatifs pondérés par λ_n, [m_n − min_k ‖l_a − l^k‖²]₊ et
    son symétrique, chacun moyenné sur le nombre de correspondances. Les
    négatifs sont cherchés dans un même sous-ensemble tiré sans remise parmi
    les descripteurs des deux nuages réunis ; pour chaque ancre, elle-même et
    son vrai correspondant en sont exclus.

    Args:
        features_a: Descripteurs locaux du nuage a, (n_a, d)
        features_b: Descripteurs locaux du nuage b, (n_b, d)
        index_a: Indices des correspondances dans a
        index_b: Indices des correspondances dans b
        cfg: Marges et taille du sous-ensemble de minage
        rng: Générateur utilisé pour tirer le sous-ensemble

    Returns:
        La perte et les gradients par rapport aux deux ensembles de descripteurs
    """
    cfg = cfg or ContrastiveConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    la = np.asarray(features_a, dtype=np.float64)
    lb = np.asarray(features_b, dtype=np.float64)
    ia = np.asarray(index_a, dtype=np.int64)
    ib = np.asarray(index_b, dtype=np.int64)
    if ia.size == 0 or ia.shape != ib.shape:
        raise ValidationError("hardest_contrastive_loss : au moins une correspondance est requise")
    n_corr = float(ia.size)
    # indices dans la réunion : a puis b
    union = np.concatenate([la, lb])
    ua, ub = ia, ib + la.shape[0]
    grad = np.zeros_like(union)

    diff = union[ua] - union[ub]
    sq = np.einsum("ij,ij->i", diff, diff)
    active = sq > cfg.m_p
    positive_term = float(np.sum(sq[active] - cfg.m_p) / n_corr)
    np.add.at(grad, ua[active], 2.0 * diff[active] / n_corr)
    np.add.at(grad, ub[active], -2.0 * diff[active] / n_corr)

    n_union = union.shape[0]
    subset = np.sort(rng.choice(n_union, size=min(cfg.mining_subset_size, n_union), replace=False))

    negative_terms = []
    for anchor_idx, partner_idx in ((ua, ub), (ub, ua)):
        excluded = np.stack([anchor_idx, partner_idx], axis=1)
        hardest, hardest_sq = _hardest_negatives(union[anchor_idx], union, subset, excluded)
        valid = hardest >= 0
        if not np.any(valid):
            logger.warning("Sous-ensemble de minage vide : termes négatifs ignorés")
            negative_terms.append(0.0)
            continue
        hinge = cfg.m_n - hardest_sq
        on = valid & (hinge > 0.0)
        negative_terms.append(float(cfg.lambda_n * np.sum(hinge[on]) / n_corr))
        d = union[anchor_idx[on]] - union[hardest[on]]
        np.add.at(grad, anchor_idx[on], -2.0 * cfg.lambda_n * d / n_corr)
        np.add.at(grad, hardest[on], 2.0 * cfg.lambda_n * d / n_corr)

    loss = positive_term + sum(negative_terms)
    grad_a, grad_b = grad[: la.shape[0]], grad[la.shape[0] :]
    return ContrastiveResult(loss, grad_a, grad_b, positive_term, tuple(negative_terms))


def bce_loss(beta: float, label: int) -> Tuple[float, float]:
    """
    Entropie croisée binaire −(y·log β + (1−y)·log(1−β)).

    β est borné à 1e-7 des bords de (0, 1) avant le logarithme.

    Returns:
        (perte, gradient par rapport à β)
    """
    if label not in (0, 1):
        raise ValidationError("Le label de l'entropie croisée doit valoir 0 ou 1")
    b = min(max(float(beta), BCE_EPS), 1.0 - BCE_EPS)
    loss = -(label * math.log(b) + (1 - label) * math.log(1.0 - b))
    grad = -label / b + (1 - label) / (1.0 - b)
    return loss, grad


@dataclass
class OptimConfig:
    """
    Configuration de l'optimiseur et de la planification du taux d'apprentissage.

    Attributes:
        learning_rate: Taux d'apprentissage initial
        schedule: "step" (division par `factor` à chaque palier), "cosine" ou "constant"
        milestones: Époques des paliers (planification "step")
        factor: Facteur de division aux paliers
        total_steps: Nombre total de pas pour "cosine" (défaut : époques × pas par époque)
        epochs: Nombre d'époques
        batch_size: Taille des lots
        momentum: Moment de la descente (0 : mise à jour p ← p − lr·grad)
    """

    learning_rate: float = 1e-3
    schedule: str = "step"
    milestones: Tuple[int, ...] = ()
    factor: float = 10.0
    total_steps: Optional[int] = None
    epochs: int = 1
    batch_size: int = 8
    momentum: float = 0.0

    def __post_init__(self):
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.schedule not in ("step", "cosine", "constant"):
            raise ValidationError(f"Planification inconnue : {self.schedule}")
        if self.learning_rate < 0:
            raise ValidationError("Le taux d'apprentissage doit être positif ou nul")
        if self.epochs < 0:
            raise ValidationError("Le nombre d'époques doit être positif ou nul")
        if self.batch_size < 1:
            raise ValidationError("La taille de lot doit être au moins 1")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("Le moment doit être dans [0, 1)")
        if self.factor <= 0:
            raise ValidationError("Le facteur de décroissance doit être strictement positif")

    def lr_at(self, step_index: int, steps_per_epoch: int = 1) -> float:
        """Taux d'apprentissage au pas `step_index`."""
        if self.schedule == "constant":
            return self.learning_rate
        if self.schedule == "step":
            epoch = step_index // max(1, steps_per_epoch)
            passed = sum(1 for milestone in self.milestones if epoch >= milestone)
            return self.learning_rate / (self.factor ** passed)
        total = self.total_steps or max(1, self.epochs * max(1, steps_per_epoch))
        t = min(step_index, total)
        return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * t / total))


def sgd_step(
    params: Sequence[ParamTensor],
    cfg: OptimConfig,
    step_index: int,
    steps_per_epoch: int = 1,
) -> float:
    """
    Un pas de descente de gradient : p ← p − lr(step_index)·grad, puis remise à zéro des gradients.

    Returns:
        Le taux d'apprentissage appliqué

    Raises:
        NumericError: Si un paramètre devient non fini
    """
    lr = cfg.lr_at(step_index, steps_per_epoch)
    for param in params:
        update = param.grad
        if cfg.momentum > 0.0:
            if param.velocity is None:
                param.velocity = np.zeros_like(param.value)
            param.velocity = cfg.momentum * param.velocity + param.grad
            update = param.velocity
        value = to_float32_grid(param.value - lr * update)
        if not np.all(np.isfinite(value)):
            raise NumericError(f"Valeurs non finies après mise à jour de {param.name}")
        param.value = value
        param.zero_grad()
    return lr


def _section_header(name: str, net: MLP) -> dict:
    return {
        "name": name,
        "output_activation": net.output_activation,
        "layers": [
            {"shape": [layer.in_dim, layer.out_dim], "activation": layer.activation}
            for layer in net.layers
        ],
    }


def checkpoint_bytes(sections: Dict[str, MLP], metadata: Optional[dict] = None) -> bytes:
    """
    Sérialise des réseaux nommés au format checkpoint.

    Format : magie b"GEOA", octet de version, longueur de l'en-tête (uint32 LE),
    en-tête JSON (formes des couches, métadonnées), puis les poids et biais de
    chaque couche en réels 32 bits petit-boutistes.
    """
    header = {
        "sections": [_section_header(name, net) for name, net in sections.items()],
        "metadata": metadata or {},
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buffer = io.BytesIO()
    buffer.write(CHECKPOINT_MAGIC)
    buffer.write(struct.pack("<B", CHECKPOINT_VERSION))
    buffer.write(struct.pack("<I", len(header_bytes)))
    buffer.write(header_bytes)
    for net in sections.values():
        for layer in net.layers:
            buffer.write(layer.weight.value.astype("<f4").tobytes())
            buffer.write(layer.bias.value.astype("<f4").tobytes())
    return buffer.getvalue()


def save_checkpoint(
    path: Union[str, Path], sections: Dict[str, MLP], metadata: Optional[dict] = None
) -> Path:
    """Écrit un checkpoint sur disque et retourne son chemin."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(sections, metadata))
    return path


def load_checkpoint(source: Union[str, Path, bytes]) -> Tuple[Dict[str, MLP], dict]:
    """
    Lit un checkpoint.

    Args:
        source: Chemin du fichier ou contenu binaire

    Returns:
        (réseaux par nom de section, métadonnées)

    Raises:
        ParseError: Si le contenu n'est pas un checkpoint valide
    """
    where = None
    if isinstance(source, (str, Path)):
        where = str(source)
        if not Path(source).is_file():
            raise DataError(f"Checkpoint introuvable : {source}")
        data = Path(source).read_bytes()
    else:
        data = bytes(source)
    if data[:4] != CHECKPOINT_MAGIC:
        raise ParseError("Signature de checkpoint invalide", path=where, offset=0)
    if len(data) < 9:
        raise ParseError("Checkpoint tronqué", path=where, offset=len(data))
    version = data[4]
    if version != CHECKPOINT_VERSION:
        raise ParseError(f"Version de checkpoint non supportée : {version}", path=where, offset=4)
    (header_len,) = struct.unpack("<I", data[5:9])
    try:
        header = json.loads(data[9 : 9 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as error:
        raise ParseError(f"En-tête de checkpoint illisible : {error}", path=where, offset=9)

    offset = 9 + header_len
    sections: Dict[str, MLP] = {}
    for section in header["sections"]:
        specs = []
        for layer in section["layers"]:
            rows, cols = layer["shape"]
            arrays = []
            for count in (rows * cols, cols):
                end = offset + 4 * count
                if end > len(data):
                    raise ParseError("Checkpoint tronqué", path=where, offset=len(data))
                arrays.append(np.frombuffer(data[offset:end], dtype="<f4").astype(np.float64))
                offset = end
            specs.append((arrays[0].reshape(rows, cols), arrays[1].reshape(1, cols), layer["activation"]))
        sections[section["name"]] = MLP.from_arrays(
            specs, output_activation=section["output_activation"], name=section["name"]
        )
    if offset != len(data):
        raise ParseError("Octets excédentaires en fin de checkpoint", path=where, offset=offset)
    return sections, header.get("metadata", {})
