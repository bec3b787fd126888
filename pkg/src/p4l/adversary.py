"""Byzantine peers: label poisoning and the kernel-density noisy-weights attack."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .learning import Architecture, PeerDataset

logger = logging.getLogger(__name__)

ATTACK_KINDS = ("none", "flip_fixed", "flip_random", "shuffle_all", "noisy_weights")


@dataclass(frozen=True)
class AttackConfig:
    attack_kind: str = "none"
    byzantine_fraction: float = 0.0
    class_a: int = 0
    class_b: int = 1
    sigma: float | None = None  # None: Silverman bandwidth per layer
    layer_selector: str = "last_two"
    allow_out_of_range: bool = False

    def __post_init__(self):
        if self.attack_kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.attack_kind!r}")
        if not 0.0 <= self.byzantine_fraction <= 1.0:
            raise ValueError("byzantine_fraction must lie in [0, 1]")
        if self.byzantine_fraction > 0.3 and not self.allow_out_of_range:
            raise ValueError("byzantine_fraction above 0.3 needs allow_out_of_range")
        if self.sigma is not None and self.sigma <= 0:
            raise ValueError("sigma must be positive")


# --------------------------------------------------------------------------
# label attacks


def flip_labels_fixed(dataset: PeerDataset, class_a: int, class_b: int) -> PeerDataset:
    for c in (class_a, class_b):
        if not 0 <= c < dataset.n_classes:
            raise ValueError(f"unknown class id {c}")
    y = dataset.y.copy()
    y[dataset.y == class_a] = class_b
    y[dataset.y == class_b] = class_a
    return PeerDataset(dataset.X, y, dataset.n_classes)


def random_class_pair(n_classes: int, rng: np.random.Generator) -> tuple[int, int]:
    a, b = rng.choice(n_classes, size=2, replace=False)
    return int(min(a, b)), int(max(a, b))


def flip_labels_random(dataset: PeerDataset, rng: np.random.Generator) -> PeerDataset:
    """Swap one uniformly chosen pair of classes from the label space."""
    if dataset.n_classes < 2 or len(np.unique(dataset.y)) < 2:
        logger.warning("flip_labels_random: fewer than two classes, shard left unchanged")
        return PeerDataset(dataset.X, dataset.y.copy(), dataset.n_classes)
    a, b = random_class_pair(dataset.n_classes, rng)
    return flip_labels_fixed(dataset, a, b)


def shuffle_labels(dataset: PeerDataset, rng: np.random.Generator) -> PeerDataset:
    return PeerDataset(dataset.X, rng.permutation(dataset.y), dataset.n_classes)


# --------------------------------------------------------------------------
# kernel density of one layer's weights


def silverman_bandwidth(weights: np.ndarray) -> float:
    w = np.asarray(weights, dtype=np.float64)
    n = w.size
    std = w.std(ddof=1) if n > 1 else 0.0
    iqr = np.subtract(*np.percentile(w, [75, 25])) if n > 1 else 0.0
    spread = min(std, iqr / 1.34) if iqr > 0 else std
    h = 0.9 * spread * n ** (-0.2)
    return float(h) if h > 0 else 1e-3


@dataclass(frozen=True)
class WeightKde:
    support_weights: np.ndarray = field(repr=False)
    sigma: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    def density(self, x) -> np.ndarray | float:
        """Sum of Gaussian kernels centred on the support (not normalised by N)."""
        x = np.asarray(x, dtype=np.float64)
        diff = x[..., None] - self.support_weights
        dens = np.exp(-0.5 * (diff / self.sigma) ** 2).sum(axis=-1) / (
            np.sqrt(2.0 * np.pi) * self.sigma
        )
        return float(dens) if dens.ndim == 0 else dens

    def cdf(self, x) -> np.ndarray | float:
        """Normalised CDF of the mixture, for goodness-of-fit tests."""
        x = np.asarray(x, dtype=np.float64)
        out = norm.cdf((x[..., None] - self.support_weights) / self.sigma).mean(axis=-1)
        return float(out) if out.ndim == 0 else out


def kde_density(kde: WeightKde, x):
    return kde.density(x)


def sample_noisy_weights(kde: WeightKde, count: int, rng: np.random.Generator) -> np.ndarray:
    """Exact mixture sampling: a random support point plus N(0, sigma^2) noise."""
    support = np.asarray(kde.support_weights, dtype=np.float64)
    if support.size == 0:
        raise ValueError("empty KDE support")
    picks = support[rng.integers(0, support.size, size=count)]
    return picks + rng.normal(0.0, kde.sigma, size=count)


def selected_layers(arch: Architecture, selector: str) -> list[slice]:
    slices = arch.layer_slices()
    if selector == "all" or len(slices) == 1:
        return slices
    if selector == "last_two":
        return slices[-2:]
    if selector == "last":
        return slices[-1:]
    raise ValueError(f"unknown layer selector {selector!r}")


def noisy_weights(
    weights: np.ndarray,
    arch: Architecture,
    rng: np.random.Generator,
    sigma: float | None = None,
    selector: str = "last_two",
) -> np.ndarray:
    """Replace the selected layers with draws from a KDE of their own weights."""
    out = np.array(weights, dtype=np.float64)
    for sl in selected_layers(arch, selector):
        layer = out[sl]
        kde = WeightKde(layer.copy(), sigma if sigma is not None else silverman_bandwidth(layer))
        out[sl] = sample_noisy_weights(kde, layer.size, rng)
    return out


# --------------------------------------------------------------------------
# population


@dataclass
class ByzantinePopulation:
    indices: frozenset[int]
    attack: AttackConfig

    def is_byzantine(self, peer_index: int) -> bool:
        return peer_index in self.indices

    @property
    def poisons_data(self) -> bool:
        return self.attack.attack_kind in ("flip_fixed", "flip_random", "shuffle_all")

    @property
    def poisons_weights(self) -> bool:
        return self.attack.attack_kind == "noisy_weights"

    def poison_dataset(self, dataset: PeerDataset, rng: np.random.Generator) -> PeerDataset:
        kind = self.attack.attack_kind
        if kind == "flip_fixed":
            return flip_labels_fixed(dataset, self.attack.class_a, self.attack.class_b)
        if kind == "flip_random":
            return flip_labels_random(dataset, rng)
        if kind == "shuffle_all":
            return shuffle_labels(dataset, rng)
        return dataset

    def contribution(self, weights: np.ndarray, arch: Architecture, rng: np.random.Generator) -> np.ndarray:
        if not self.poisons_weights:
            return weights
        return noisy_weights(weights, arch, rng, self.attack.sigma, self.attack.layer_selector)


def make_byzantine_population(
    num_peers: int, fraction: float, attack: AttackConfig, rng: np.random.Generator
) -> ByzantinePopulation:
    """Pick ``round(fraction * num_peers)`` Byzantine peers uniformly at random."""
    count = int(round(fraction * num_peers))
    if fraction > 0 and count < 1:
        raise ValueError("fraction * num_peers must be at least 1 for a non-zero fraction")
    if count == 0 or attack.attack_kind == "none":
        return ByzantinePopulation(frozenset(), attack)
    chosen = rng.choice(num_peers, size=count, replace=False)
    return ByzantinePopulation(frozenset(int(i) for i in chosen), attack)
