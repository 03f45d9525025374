"""Task families, success predicates and seen/unseen splits."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np

from ntp.errors import ConfigurationError
from ntp.worldsim import TABLE, EntityType, Layout, SceneEntity, WorldState


class Family(str, Enum):
    STACKING = "block_stacking"
    SORTING = "object_sorting"
    CLEANUP = "table_cleanup"


class Axis(str, Enum):
    LENGTH = "length"
    TOPOLOGY = "topology"
    SEMANTICS = "semantics"


N_CATEGORIES = 4
N_CONTAINERS = 4
MAX_PER_CATEGORY = 10
MAX_BOWLS = 4
MAX_FORKS = 20

CONTAINER_RADIUS = 0.08
BIN_RIM = 0.10
TRAY_RIM = 0.02


def stacking_layout(n_blocks: int) -> Layout:
    types = tuple(EntityType(f"block_{i}", "object") for i in range(n_blocks))
    return Layout(types, tuple(range(n_blocks)))


def sorting_layout(max_per_category: int = MAX_PER_CATEGORY) -> Layout:
    cats = tuple(EntityType(f"category_{c}", "object") for c in range(N_CATEGORIES))
    bins = tuple(
        EntityType(f"container_{j}", "container", radius=CONTAINER_RADIUS, rim=BIN_RIM,
                   accepts=frozenset(range(N_CATEGORIES)), inset=0.05)
        for j in range(N_CONTAINERS)
    )
    slots = [c for c in range(N_CATEGORIES) for _ in range(max_per_category)]
    slots += [N_CATEGORIES + j for j in range(N_CONTAINERS)]
    return Layout(cats + bins, tuple(slots))


def cleanup_layout() -> Layout:
    types = (
        EntityType("bowl", "object", accepts=frozenset({1}), inset=0.02),
        EntityType("fork", "object"),
        EntityType("bin", "container", radius=CONTAINER_RADIUS, rim=TRAY_RIM),
    )
    return Layout(types, tuple([0] * MAX_BOWLS + [1] * MAX_FORKS + [2]))


def _root_container(state: WorldState, eid: int) -> int | None:
    """Follow supporters down to a container id; None if the chain ends on the table or gripper."""
    cur = state.entity(eid)
    while True:
        if state.is_container(cur.id):
            return cur.id
        sup = cur.supported_by
        if sup is None or sup == TABLE:
            return None
        cur = state.entity(sup)


class TaskInstance:
    family: Family

    def layout(self) -> Layout:
        raise NotImplementedError

    def scene(self) -> list[SceneEntity]:
        raise NotImplementedError

    def canonical_key(self) -> tuple:
        """End-configuration identity; tasks with equal keys are the same semantic task."""
        raise NotImplementedError

    def topology_key(self) -> tuple:
        """End configuration plus the order sub-tasks are carried out in."""
        raise NotImplementedError

    def success(self, state: WorldState) -> bool:
        raise NotImplementedError

    def to_json(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class StackingTask(TaskInstance):
    n_blocks: int
    towers: tuple[tuple[int, ...], ...]  # bottom-to-top, build order; singletons omitted

    family = Family.STACKING

    def __post_init__(self):
        seen = [b for t in self.towers for b in t]
        if len(seen) != len(set(seen)) or any(not 0 <= b < self.n_blocks for b in seen):
            raise ConfigurationError(f"malformed towers {self.towers}")
        if any(len(t) < 2 for t in self.towers):
            raise ConfigurationError("towers must hold at least two blocks")

    def pairs(self) -> list[tuple[int, int]]:
        """(block, placed_on) in build order."""
        return [(t[i + 1], t[i]) for t in self.towers for i in range(len(t) - 1)]

    def layout(self) -> Layout:
        return stacking_layout(self.n_blocks)

    def scene(self):
        return [SceneEntity(i, i) for i in range(self.n_blocks)]

    def canonical_key(self):
        return ("stack", self.n_blocks, tuple(sorted(self.pairs())))

    def topology_key(self):
        return self.canonical_key() + (self.towers,)

    def success(self, state):
        return all(state.obj(a).supported_by == b for a, b in self.pairs())

    def to_json(self):
        return {"family": self.family.value, "n_blocks": self.n_blocks, "towers": [list(t) for t in self.towers]}


@dataclass(frozen=True)
class SortingTask(TaskInstance):
    mapping: tuple[int, ...]  # category -> container index
    counts: tuple[int, ...]  # instances per category
    max_per_category: int = MAX_PER_CATEGORY

    family = Family.SORTING

    def __post_init__(self):
        if len(self.mapping) != N_CATEGORIES or any(not 0 <= m < N_CONTAINERS for m in self.mapping):
            raise ConfigurationError(f"sorting map must be total over {N_CATEGORIES} categories")
        if len(self.counts) != N_CATEGORIES or any(not 0 <= c <= self.max_per_category for c in self.counts):
            raise ConfigurationError(f"instance counts out of range: {self.counts}")

    def object_id(self, category: int, k: int) -> int:
        return category * self.max_per_category + k

    def container_id(self, j: int) -> int:
        return N_CATEGORIES * self.max_per_category + j

    def layout(self):
        return sorting_layout(self.max_per_category)

    def scene(self):
        ents = [SceneEntity(self.object_id(c, k), c) for c in range(N_CATEGORIES) for k in range(self.counts[c])]
        ents += [SceneEntity(self.container_id(j), N_CATEGORIES + j) for j in range(N_CONTAINERS)]
        return ents

    def with_counts(self, counts: Sequence[int]) -> "SortingTask":
        return SortingTask(self.mapping, tuple(counts), self.max_per_category)

    def canonical_key(self):
        return ("sort", self.mapping, self.counts)

    def topology_key(self):
        return self.canonical_key()

    def success(self, state):
        return all(
            _root_container(state, o.id) == self.container_id(self.mapping[o.category])
            for o in state.objects
        )

    def to_json(self):
        return {"family": self.family.value, "mapping": list(self.mapping), "counts": list(self.counts),
                "max_per_category": self.max_per_category}


@dataclass(frozen=True)
class CleanupTask(TaskInstance):
    num_bowls: int
    num_forks: int
    bowl_order: tuple[int, ...] = field(default=())  # bottom-to-top bowl ids

    family = Family.CLEANUP

    def __post_init__(self):
        if not 1 <= self.num_bowls <= MAX_BOWLS or not 0 <= self.num_forks <= MAX_FORKS:
            raise ConfigurationError(f"cleanup counts out of range: {self.num_bowls}, {self.num_forks}")
        if not self.bowl_order:
            object.__setattr__(self, "bowl_order", tuple(range(self.num_bowls)))
        if sorted(self.bowl_order) != list(range(self.num_bowls)):
            raise ConfigurationError(f"bowl order {self.bowl_order} is not a permutation")

    bin_id = MAX_BOWLS + MAX_FORKS

    def fork_ids(self) -> list[int]:
        return [MAX_BOWLS + k for k in range(self.num_forks)]

    def layout(self):
        return cleanup_layout()

    def scene(self):
        ents = [SceneEntity(b, 0) for b in range(self.num_bowls)]
        ents += [SceneEntity(f, 1) for f in self.fork_ids()]
        ents.append(SceneEntity(self.bin_id, 2))
        return ents

    def canonical_key(self):
        return ("cleanup", self.num_bowls, self.num_forks)

    def topology_key(self):
        return self.canonical_key() + (self.bowl_order,)

    def success(self, state):
        bowls = [state.obj(b) for b in range(self.num_bowls)]
        on_bin = [b for b in bowls if b.supported_by == self.bin_id]
        if len(on_bin) != 1:
            return False
        # walk the single chain upwards; every bowl must be on it
        chain, cur = [on_bin[0].id], on_bin[0].id
        while True:
            above = [b for b in bowls if b.supported_by == cur]
            if len(above) > 1:
                return False
            if not above:
                break
            cur = above[0].id
            chain.append(cur)
        if len(chain) != self.num_bowls:
            return False
        return all(state.obj(f).supported_by == chain[-1] for f in self.fork_ids())

    def to_json(self):
        return {"family": self.family.value, "num_bowls": self.num_bowls, "num_forks": self.num_forks,
                "bowl_order": list(self.bowl_order)}


def success(state: WorldState, task: TaskInstance) -> bool:
    return task.success(state)


def task_from_json(d: dict) -> TaskInstance:
    fam = Family(d["family"])
    if fam is Family.STACKING:
        return StackingTask(d["n_blocks"], tuple(tuple(t) for t in d["towers"]))
    if fam is Family.SORTING:
        return SortingTask(tuple(d["mapping"]), tuple(d["counts"]), d.get("max_per_category", MAX_PER_CATEGORY))
    return CleanupTask(d["num_bowls"], d["num_forks"], tuple(d["bowl_order"]))


# ----------------------------------------------------------------------------- sampling


def enumerate_sorting_goals() -> list[tuple[int, ...]]:
    return list(itertools.product(range(N_CONTAINERS), repeat=N_CATEGORIES))


def sorting_cover() -> list[tuple[int, ...]]:
    """Four maps that jointly use every (category, container) pair exactly once."""
    return [tuple((c + j) % N_CONTAINERS for c in range(N_CATEGORIES)) for j in range(N_CONTAINERS)]


def lah(n: int, k: int) -> int:
    """Number of ways to arrange n labelled blocks into k unordered non-empty towers."""
    if k < 1 or k > n:
        return 0
    return math.comb(n - 1, k - 1) * math.factorial(n) // math.factorial(k)


def count_stacking_goals(n_blocks: int) -> int:
    """Distinct end configurations with at least one stacked pair."""
    return sum(lah(n_blocks, k) for k in range(1, n_blocks))


def sample_stacking(n_blocks: int, rng: np.random.Generator) -> StackingTask:
    # uniform over configurations: pick tower count k with weight Lah(n, k), then a
    # random permutation cut at k-1 random points; each k-tower configuration is hit k! ways.
    ks = np.arange(1, n_blocks)
    w = np.array([lah(n_blocks, k) for k in ks], dtype=float)
    k = int(rng.choice(ks, p=w / w.sum()))
    perm = [int(b) for b in rng.permutation(n_blocks)]
    cuts = sorted(int(c) for c in rng.choice(np.arange(1, n_blocks), size=k - 1, replace=False))
    bounds = [0, *cuts, n_blocks]
    towers = [tuple(perm[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    return StackingTask(n_blocks, tuple(t for t in towers if len(t) >= 2))


def sample_task(family: Family | str, rng: np.random.Generator, *, n_blocks: int = 8,
                max_count: int = 4, max_per_category: int = MAX_PER_CATEGORY) -> TaskInstance:
    family = Family(family)
    if family is Family.STACKING:
        return sample_stacking(n_blocks, rng)
    if family is Family.SORTING:
        mapping = tuple(int(m) for m in rng.integers(0, N_CONTAINERS, size=N_CATEGORIES))
        counts = tuple(int(c) for c in rng.integers(1, max_count + 1, size=N_CATEGORIES))
        return SortingTask(mapping, counts, max_per_category)
    bowls = int(rng.integers(1, MAX_BOWLS + 1))
    forks = int(rng.integers(0, MAX_FORKS + 1))
    return CleanupTask(bowls, forks, tuple(int(b) for b in rng.permutation(bowls)))


def distinct_stacking_pool(n_blocks: int, size: int, rng: np.random.Generator) -> list[StackingTask]:
    total = count_stacking_goals(n_blocks)
    if size > total:
        raise ConfigurationError(f"only {total} distinct {n_blocks}-block goals exist, asked for {size}")
    pool, keys = [], set()
    while len(pool) < size:
        t = sample_stacking(n_blocks, rng)
        if t.canonical_key() not in keys:
            keys.add(t.canonical_key())
            pool.append(t)
    return pool


# ----------------------------------------------------------------------------- splits


@dataclass
class DatasetSplit:
    family: Family
    axis: Axis
    seen: list[TaskInstance]
    unseen: list[TaskInstance]
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def key(self, task: TaskInstance) -> tuple:
        return task.topology_key() if self.axis is Axis.TOPOLOGY else task.canonical_key()

    def disjoint(self) -> bool:
        return not ({self.key(t) for t in self.seen} & {self.key(t) for t in self.unseen})

    def to_json(self) -> dict:
        return {
            "family": self.family.value, "axis": self.axis.value, "seed": self.seed, "meta": self.meta,
            "seen": [t.to_json() for t in self.seen], "unseen": [t.to_json() for t in self.unseen],
        }

    @classmethod
    def from_json(cls, d: dict) -> "DatasetSplit":
        return cls(Family(d["family"]), Axis(d["axis"]), [task_from_json(t) for t in d["seen"]],
                   [task_from_json(t) for t in d["unseen"]], d.get("seed", 0), d.get("meta", {}))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path) -> "DatasetSplit":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


VALID_AXES = {
    Family.SORTING: {Axis.SEMANTICS, Axis.LENGTH},
    Family.STACKING: {Axis.SEMANTICS, Axis.TOPOLOGY},
    Family.CLEANUP: {Axis.LENGTH, Axis.TOPOLOGY},
}


def make_splits(family: Family | str, axis: Axis | str, rng: np.random.Generator, n_train: int = 4, *,
                n_unseen: int | None = None, n_blocks: int = 8, train_max_count: int = 4,
                eval_count: int = MAX_PER_CATEGORY, seed: int = 0) -> DatasetSplit:
    """Build a seen/unseen split along one generalisation axis.

    Stacking semantics draws one pool of distinct goals; the first ``n_unseen``
    are held out and the next ``n_train`` are seen, so growing ``n_train``
    with a fixed rng nests the training sets and keeps the held-out set fixed.
    """
    family, axis = Family(family), Axis(axis)
    if axis not in VALID_AXES[family]:
        raise ConfigurationError(f"axis {axis.value} is not defined for {family.value}")
    meta = {"n_train": n_train}

    if family is Family.SORTING:
        cover = sorting_cover()
        rest = [m for m in enumerate_sorting_goals() if m not in cover]
        if axis is Axis.SEMANTICS:
            seen = [SortingTask(m, (1,) * N_CATEGORIES) for m in cover]
            unseen = [SortingTask(m, (1,) * N_CATEGORIES) for m in rest]
        else:
            seen = []
            for i in range(n_train):
                counts = tuple(int(c) for c in rng.integers(1, train_max_count + 1, size=N_CATEGORIES))
                seen.append(SortingTask(cover[i % len(cover)], counts))
            unseen = [SortingTask(m, (eval_count,) * N_CATEGORIES) for m in rest]
            meta.update(train_max_count=train_max_count, eval_count=eval_count)

    elif family is Family.STACKING:
        n_unseen = n_train if n_unseen is None else n_unseen
        meta.update(n_blocks=n_blocks, n_unseen=n_unseen)
        if axis is Axis.SEMANTICS:
            pool = distinct_stacking_pool(n_blocks, n_unseen + n_train, rng)
            unseen, seen = pool[:n_unseen], pool[n_unseen:]
        else:
            seen = []
            keys = set()
            while len(seen) < n_train:
                t = sample_stacking(n_blocks, rng)
                if len(t.towers) >= 2 and t.canonical_key() not in keys:
                    keys.add(t.canonical_key())
                    seen.append(t)
            unseen = []
            for t in seen[:n_unseen]:
                while True:
                    order = [t.towers[int(i)] for i in rng.permutation(len(t.towers))]
                    if tuple(order) != t.towers:
                        break
                unseen.append(StackingTask(t.n_blocks, tuple(order)))

    else:
        n_unseen = n_train if n_unseen is None else n_unseen
        if axis is Axis.LENGTH:
            half = MAX_FORKS // 2
            seen = [CleanupTask(int(rng.integers(1, MAX_BOWLS + 1)), int(rng.integers(0, half + 1)))
                    for _ in range(n_train)]
            unseen = [CleanupTask(int(rng.integers(1, MAX_BOWLS + 1)), int(rng.integers(half + 1, MAX_FORKS + 1)))
                      for _ in range(n_unseen)]
        else:
            seen = [CleanupTask(int(rng.integers(2, MAX_BOWLS + 1)), int(rng.integers(0, MAX_FORKS + 1)))
                    for _ in range(n_train)]
            unseen = []
            for _ in range(n_unseen):
                b = int(rng.integers(2, MAX_BOWLS + 1))
                while True:
                    order = tuple(int(i) for i in rng.permutation(b))
                    if order != tuple(range(b)):
                        break
                unseen.append(CleanupTask(b, int(rng.integers(0, MAX_FORKS + 1)), order))

    split = DatasetSplit(family, axis, seen, unseen, seed, meta)
    assert split.disjoint()
    return split
