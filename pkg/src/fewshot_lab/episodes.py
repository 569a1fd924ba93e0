"""N-way K-shot episode sampling with index-addressable streams."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .datasets import LabeledVectorDataset
from .numerics import InvalidInputError, SeededRng, derive_seed


class InfeasibleEpisodeError(InvalidInputError):
    pass


@dataclass(frozen=True)
class EpisodeSpec:
    n_way: int = 5
    k_shot: int = 1
    q_queries: int = 15

    def __post_init__(self):
        if self.n_way < 2 or self.k_shot < 1 or self.q_queries < 1:
            raise InvalidInputError(f"invalid episode spec {self}: need n_way>=2, k_shot>=1, q_queries>=1")


@dataclass(frozen=True)
class Episode:
    support_features: np.ndarray
    support_labels: np.ndarray
    query_features: np.ndarray
    query_labels: np.ndarray
    class_map: tuple[int, ...]
    support_indices: np.ndarray
    query_indices: np.ndarray

    @property
    def n_way(self) -> int:
        return len(self.class_map)


# per-class sample indices, keyed by dataset identity
_INDEX_CACHE: dict[int, tuple[LabeledVectorDataset, list]] = {}


def _indices_by_class(dataset: LabeledVectorDataset) -> list[np.ndarray]:
    hit = _INDEX_CACHE.get(id(dataset))
    if hit is None or hit[0] is not dataset:
        if len(_INDEX_CACHE) > 32:
            _INDEX_CACHE.clear()
        hit = (dataset, dataset.indices_by_class())
        _INDEX_CACHE[id(dataset)] = hit
    return hit[1]


def check_feasible(dataset: LabeledVectorDataset, class_subset: Sequence[int],
                   spec: EpisodeSpec) -> None:
    classes = list(class_subset)
    if len(classes) < spec.n_way:
        raise InfeasibleEpisodeError(
            f"{spec.n_way}-way episodes need {spec.n_way} classes, subset has {len(classes)}")
    counts = dataset.class_counts()
    need = spec.k_shot + spec.q_queries
    for c in classes:
        if counts[c] < need:
            raise InfeasibleEpisodeError(
                f"class {c} has {counts[c]} samples, k_shot + q_queries = {need}")


def sample_episode(dataset: LabeledVectorDataset, class_subset: Sequence[int],
                   spec: EpisodeSpec, rng: SeededRng) -> Episode:
    """Choose n_way classes, then k_shot + q_queries samples from each.

    The first k_shot draws of a class go to the support set; episode label i
    corresponds to the i-th chosen class.
    """
    classes = np.asarray(class_subset, dtype=np.int64)
    if classes.size < spec.n_way:
        raise InfeasibleEpisodeError(
            f"{spec.n_way}-way episodes need {spec.n_way} classes, subset has {classes.size}")
    chosen = classes[rng.sample_without_replacement(classes.size, spec.n_way)]
    by_class = _indices_by_class(dataset)
    need = spec.k_shot + spec.q_queries
    support, query = [], []
    for c in chosen:
        pool = by_class[c]
        if pool.size < need:
            raise InfeasibleEpisodeError(
                f"class {c} has {pool.size} samples, k_shot + q_queries = {need}")
        picked = pool[rng.sample_without_replacement(pool.size, need)]
        support.append(picked[:spec.k_shot])
        query.append(picked[spec.k_shot:])
    s_idx = np.concatenate(support)
    q_idx = np.concatenate(query)
    return Episode(
        support_features=dataset.features[s_idx],
        support_labels=np.repeat(np.arange(spec.n_way), spec.k_shot),
        query_features=dataset.features[q_idx],
        query_labels=np.repeat(np.arange(spec.n_way), spec.q_queries),
        class_map=tuple(int(c) for c in chosen),
        support_indices=s_idx,
        query_indices=q_idx,
    )


class EpisodeStream(Sequence):
    """Lazily materialised episodes; episode i uses the child seed (seed, i)."""

    def __init__(self, dataset: LabeledVectorDataset, class_subset: Sequence[int],
                 spec: EpisodeSpec, count: int, seed: int):
        if count < 1:
            raise InvalidInputError("episode count must be >= 1")
        self.dataset = dataset
        self.class_subset = tuple(int(c) for c in class_subset)
        self.spec = spec
        self.count = count
        self.seed = seed

    def __len__(self) -> int:
        return self.count

    def rng_for(self, index: int) -> SeededRng:
        return SeededRng(derive_seed(self.seed, index))

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(self.count))]
        if not -self.count <= index < self.count:
            raise IndexError(index)
        index %= self.count
        return sample_episode(self.dataset, self.class_subset, self.spec, self.rng_for(index))

    def __iter__(self) -> Iterator[Episode]:
        for i in range(self.count):
            yield self[i]


def episode_stream(dataset, class_subset, spec: EpisodeSpec, count: int, seed: int) -> EpisodeStream:
    return EpisodeStream(dataset, class_subset, spec, count, seed)
