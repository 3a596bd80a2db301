"""Interaction datasets: file loading, validation, splitting, synthetic data."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np


class DatasetError(ValueError):
    """Malformed input file or a dataset that breaks its invariants."""


def _pairs(pairs: Iterable[tuple[int, int]]) -> np.ndarray:
    arr = np.array(sorted(set((int(a), int(b)) for a, b in pairs)), dtype=np.int64)
    arr = arr.reshape(-1, 2)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class InteractionDataset:
    """Users, items and groups with their implicit-feedback interactions.

    Pair arrays are sorted, deduplicated ``(n, 2)`` int arrays; social pairs are
    stored once with ``a < b``.
    """

    n_users: int
    n_items: int
    n_groups: int
    user_item: np.ndarray
    group_item: np.ndarray
    social: np.ndarray
    members: tuple[tuple[int, ...], ...]
    group_items: tuple[tuple[int, ...], ...] = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "user_item", _pairs(map(tuple, self.user_item)))
        object.__setattr__(self, "group_item", _pairs(map(tuple, self.group_item)))
        object.__setattr__(self, "social", _pairs((min(a, b), max(a, b)) for a, b in self.social))
        object.__setattr__(self, "members", tuple(tuple(sorted(set(int(u) for u in m))) for m in self.members))
        per_group: list[list[int]] = [[] for _ in range(self.n_groups)]
        for t, j in self.group_item:
            if 0 <= t < self.n_groups:
                per_group[t].append(int(j))
        object.__setattr__(self, "group_items", tuple(tuple(items) for items in per_group))
        self.validate()

    def validate(self) -> None:
        M, N, K = self.n_users, self.n_items, self.n_groups
        if min(M, N, K) < 0:
            raise DatasetError("counts must be non-negative")
        _check_range(self.user_item, M, N, "user-item")
        _check_range(self.group_item, K, N, "group-item")
        _check_range(self.social, M, M, "social")
        if len(self.social) and np.any(self.social[:, 0] == self.social[:, 1]):
            raise DatasetError("social edges may not be self-loops")
        if len(self.members) != K:
            raise DatasetError(f"expected member lists for {K} groups, got {len(self.members)}")
        for t, m in enumerate(self.members):
            if not m:
                raise DatasetError(f"group {t} has no members")
            if m[0] < 0 or m[-1] >= M:
                raise DatasetError(f"group {t} references a user outside [0, {M})")

    def user_items(self) -> list[np.ndarray]:
        return _adjacency(self.user_item, self.n_users)

    def group_item_lists(self) -> list[np.ndarray]:
        return _adjacency(self.group_item, self.n_groups)

    def neighbors(self) -> list[np.ndarray]:
        both = np.concatenate([self.social, self.social[:, ::-1]]) if len(self.social) else self.social
        return _adjacency(both, self.n_users)

    def stats(self) -> dict[str, int]:
        return {
            "users": self.n_users,
            "groups": self.n_groups,
            "items": self.n_items,
            "user_item": len(self.user_item),
            "group_item": len(self.group_item),
            "social": len(self.social),
        }

    def with_interactions(self, user_item, group_item) -> "InteractionDataset":
        return InteractionDataset(self.n_users, self.n_items, self.n_groups, user_item, group_item,
                                  self.social, self.members)

    def same_as(self, other: "InteractionDataset") -> bool:
        return (
            (self.n_users, self.n_items, self.n_groups) == (other.n_users, other.n_items, other.n_groups)
            and np.array_equal(self.user_item, other.user_item)
            and np.array_equal(self.group_item, other.group_item)
            and np.array_equal(self.social, other.social)
            and self.members == other.members
        )


def _check_range(pairs: np.ndarray, n_left: int, n_right: int, what: str) -> None:
    if not len(pairs):
        return
    if pairs[:, 0].min() < 0 or pairs[:, 0].max() >= n_left:
        raise DatasetError(f"{what}: left index outside [0, {n_left})")
    if pairs[:, 1].min() < 0 or pairs[:, 1].max() >= n_right:
        raise DatasetError(f"{what}: right index outside [0, {n_right})")


def _adjacency(pairs: np.ndarray, n: int) -> list[np.ndarray]:
    out: list[list[int]] = [[] for _ in range(n)]
    for a, b in pairs:
        out[a].append(int(b))
    return [np.array(sorted(x), dtype=np.int64) for x in out]


# -- file IO -------------------------------------------------------------------

def _read_rows(path: Path) -> list[tuple[int, list[int]]]:
    """Parse whitespace-separated integer rows, returning (line number, values)."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such file: {path}")
    rows = []
    with open(path, encoding="utf-8", newline=None) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                values = [int(tok, 10) for tok in line.split()]
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: expected integers, got {line!r}") from None
            rows.append((lineno, values))
    return rows


def _read_pairs(path) -> list[tuple[int, int]]:
    pairs = []
    for lineno, values in _read_rows(path):
        if len(values) != 2:
            raise DatasetError(f"{path}:{lineno}: expected two integers, got {len(values)}")
        pairs.append((values[0], values[1]))
    return pairs


def load_dataset(user_item_path, group_item_path, members_path, social_path=None,
                 n_users: int | None = None, n_items: int | None = None,
                 n_groups: int | None = None) -> InteractionDataset:
    """Read the four interaction files.

    Counts not given explicitly are inferred as ``max id + 1`` across files;
    when given, any id at or beyond them is a validation error.
    """
    user_item = _read_pairs(user_item_path)
    group_item = _read_pairs(group_item_path)
    social = _read_pairs(social_path) if social_path is not None else []
    members: dict[int, list[int]] = {}
    for lineno, values in _read_rows(members_path):
        if len(values) < 2:
            raise DatasetError(f"{members_path}:{lineno}: group line needs at least one member")
        members.setdefault(values[0], []).extend(values[1:])

    def infer(ids: list[int]) -> int:
        return max(ids) + 1 if ids else 0

    if n_users is None:
        n_users = infer([u for u, _ in user_item] + [u for p in social for u in p]
                        + [u for m in members.values() for u in m])
    if n_items is None:
        n_items = infer([j for _, j in user_item] + [j for _, j in group_item])
    if n_groups is None:
        n_groups = infer([t for t, _ in group_item] + list(members))
    if any(t < 0 or t >= n_groups for t in members):
        raise DatasetError(f"{members_path}: group id outside [0, {n_groups})")
    for u, v in social:
        if u == v:
            raise DatasetError(f"{social_path}: self-loop on user {u}")
    member_lists = tuple(tuple(members.get(t, ())) for t in range(n_groups))
    return InteractionDataset(n_users, n_items, n_groups, user_item, group_item, social, member_lists)


def save_dataset(ds: InteractionDataset, directory) -> dict[str, Path]:
    """Write the dataset as the four text files; returns their paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "user_item": directory / "user_item.txt",
        "group_item": directory / "group_item.txt",
        "members": directory / "members.txt",
        "social": directory / "social.txt",
    }
    for key, arr in (("user_item", ds.user_item), ("group_item", ds.group_item), ("social", ds.social)):
        paths[key].write_text("".join(f"{a} {b}\n" for a, b in arr))
    paths["members"].write_text("".join(
        f"{t} {' '.join(map(str, m))}\n" for t, m in enumerate(ds.members)))
    return paths


# -- splitting -----------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    strategy: str = "leave-one-out"
    ratio: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in ("leave-one-out", "ratio"):
            raise ValueError(f"unknown split strategy {self.strategy!r}")
        if not 0.0 < self.ratio < 1.0:
            raise ValueError("split ratio must lie in (0, 1)")


@dataclass(frozen=True)
class TestCase:
    __test__ = False  # not a pytest class

    kind: str  # "user" or "group"
    entity: int
    item: int


def split(ds: InteractionDataset, spec: SplitSpec) -> tuple[InteractionDataset, list[TestCase]]:
    """Hold out interactions per entity; entities with a single interaction stay in train."""
    rng = np.random.default_rng(spec.seed)
    cases: list[TestCase] = []
    kept: dict[str, list[tuple[int, int]]] = {"user": [], "group": []}
    for kind, lists in (("user", ds.user_items()), ("group", ds.group_item_lists())):
        for entity, items in enumerate(lists):
            n = len(items)
            if n < 2:
                kept[kind].extend((entity, int(j)) for j in items)
                continue
            if spec.strategy == "leave-one-out":
                n_test = 1
            else:
                n_test = min(n - 1, max(1, int(round((1.0 - spec.ratio) * n))))
            held = set(rng.choice(n, size=n_test, replace=False).tolist())
            for pos, j in enumerate(items):
                if pos in held:
                    cases.append(TestCase(kind, entity, int(j)))
                else:
                    kept[kind].append((entity, int(j)))
    return ds.with_interactions(kept["user"], kept["group"]), cases


# -- synthetic data ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class SyntheticDataset:
    dataset: InteractionDataset
    influencers: tuple[int, ...]


def generate_synthetic_influencer(n_users: int, n_items: int, n_groups: int, seed: int) -> SyntheticDataset:
    """Groups that follow one socially central member rather than the majority.

    Each group gets a private item pool that only its influencer interacts
    with; the group's positives are that pool. The remaining members share a
    majority pool of popular items the group never adopts. Influencers are
    linked socially to their members and to a few random users.
    """
    if n_users < 4 or n_items < 10 or n_groups < 2:
        raise ValueError("need n_users >= 4, n_items >= 10 and n_groups >= 2")
    pool_size = max(2, n_items // (2 * n_groups))
    n_private = pool_size * n_groups
    if n_items - n_private < 2:
        raise ValueError(f"{n_items} items cannot hold {n_groups} private pools plus a majority pool")
    rng = np.random.default_rng(seed)
    private = rng.permutation(n_items)
    popular = np.sort(private[n_private:])
    pools = [np.sort(private[t * pool_size:(t + 1) * pool_size]) for t in range(n_groups)]

    users = rng.permutation(n_users)
    influencers = [int(users[t % n_users]) for t in range(n_groups)]
    user_item: set[tuple[int, int]] = set()
    group_item: set[tuple[int, int]] = set()
    social: set[tuple[int, int]] = set()
    members = []
    for t in range(n_groups):
        boss = influencers[t]
        others = [u for u in range(n_users) if u != boss]
        size = int(rng.integers(3, min(5, n_users) + 1))
        crowd = [int(u) for u in rng.choice(others, size=size - 1, replace=False)]
        members.append(sorted([boss] + crowd))
        majority = rng.choice(popular, size=min(2, len(popular)), replace=False)
        for j in pools[t]:
            user_item.add((boss, int(j)))
            group_item.add((t, int(j)))
        for u in crowd:
            for j in majority:
                user_item.add((u, int(j)))
            social.add((min(u, boss), max(u, boss)))
        for u in rng.choice(others, size=min(3, len(others)), replace=False):
            social.add((min(int(u), boss), max(int(u), boss)))
    for u in range(n_users):
        for j in rng.choice(popular, size=min(2, len(popular)), replace=False):
            user_item.add((u, int(j)))
    ds = InteractionDataset(n_users, n_items, n_groups, sorted(user_item), sorted(group_item),
                            sorted(social), members)
    return SyntheticDataset(ds, tuple(influencers))

