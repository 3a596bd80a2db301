"""Full-candidate ranking, HR/NDCG, paired permutation tests and the
preference-bias probe."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import TrainConfig
from .data import InteractionDataset, TestCase
from .graphs import Graphs
from .model import ForwardOutput, ModelParams, forward


@dataclass(frozen=True)
class RankedCase:
    kind: str
    entity: int
    item: int
    rank: int  # 1-based
    top: tuple[int, ...]


def entity_scores(out: ForwardOutput, kind: str, entity: int) -> np.ndarray:
    reps = out.users if kind == "user" else out.groups
    if kind not in ("user", "group"):
        raise ValueError(f"unknown entity kind {kind!r}")
    if not 0 <= entity < reps.shape[0]:
        raise KeyError(f"unknown {kind} id {entity}")
    return out.items.data @ reps.data[entity]


def order_items(scores: np.ndarray, exclude: np.ndarray | None = None) -> np.ndarray:
    """Item ids by descending score, ascending id on ties."""
    ids = np.arange(len(scores))
    order = np.lexsort((ids, -scores))
    if exclude is not None and len(exclude):
        order = order[~np.isin(order, exclude)]
    return order


def rank_of(scores: np.ndarray, item: int, exclude: np.ndarray | None = None) -> int:
    s = scores[item]
    ids = np.arange(len(scores))
    ahead = (scores > s) | ((scores == s) & (ids < item))
    if exclude is not None and len(exclude):
        ahead[exclude] = False
    return int(ahead.sum()) + 1


def rank_items(out: ForwardOutput, kind: str, entity: int, exclude: np.ndarray | None = None) -> np.ndarray:
    return order_items(entity_scores(out, kind, entity), exclude)


def rank_cases(out: ForwardOutput, cases: Sequence[TestCase], train_positives=None,
               top_k: int = 10) -> list[RankedCase]:
    """Rank each held-out item among all items.

    ``train_positives`` is a PositiveIndex; when given, the entity's other
    train positives are removed from the candidates.
    """
    ranked = []
    for c in cases:
        scores = entity_scores(out, c.kind, c.entity)
        exclude = None
        if train_positives is not None:
            exclude = train_positives.positives(c.kind, c.entity)
            exclude = exclude[exclude != c.item]
        ranked.append(RankedCase(c.kind, c.entity, c.item, rank_of(scores, c.item, exclude),
                                 tuple(int(i) for i in order_items(scores, exclude)[:top_k])))
    return ranked


def per_case_metrics(ranks: Sequence[int], k: int) -> tuple[np.ndarray, np.ndarray]:
    ranks = np.asarray(ranks, dtype=np.float64)
    hit = (ranks <= k).astype(np.float64)
    ndcg = np.where(ranks <= k, 1.0 / np.log2(ranks + 1.0), 0.0)
    return hit, ndcg


def ranking_metrics(results: Sequence[RankedCase], k: int) -> tuple[float, float]:
    """(HR@k, NDCG@k) averaged over cases."""
    if not results:
        raise ValueError("no ranking results to score")
    hit, ndcg = per_case_metrics([r.rank for r in results], k)
    # fsum keeps the average independent of summation order
    return math.fsum(hit) / len(hit), math.fsum(ndcg) / len(ndcg)


def evaluate_cases(params: ModelParams, graphs: Graphs, config: TrainConfig, cases: Sequence[TestCase],
                   train_positives=None, ks: Sequence[int] = (5, 10)) -> dict[str, float]:
    out = forward(params, graphs, config, training=False)
    ranked = rank_cases(out, cases, train_positives, top_k=max(ks))
    metrics = {}
    for k in ks:
        hr, ndcg = ranking_metrics(ranked, k)
        metrics[f"HR@{k}"] = hr
        metrics[f"NDCG@{k}"] = ndcg
    return metrics


# -- significance ----------------------------------------------------------------

def _exact_count(d: np.ndarray, observed: float, tol: float) -> int:
    n = len(d)
    count = 0
    chunk_bits = min(n, 16)
    low = np.array(list(itertools.product((1.0, -1.0), repeat=chunk_bits)))  # (2^c, c)
    low_sums = low @ d[n - chunk_bits:]
    high_n = n - chunk_bits
    for signs in itertools.product((1.0, -1.0), repeat=high_n):
        base = float(np.dot(signs, d[:high_n])) if high_n else 0.0
        means = (base + low_sums) / n
        count += int(np.sum(np.abs(means) >= observed - tol))
    return count


def permutation_test(a: Sequence[float], b: Sequence[float], n_permutations: int = 10000, seed: int = 0,
                     exact: bool | None = None) -> float:
    """Two-sided paired sign-flip test on the mean difference.

    Exact enumeration for up to 20 pairs (unless ``exact`` says otherwise);
    Monte Carlo otherwise, with the observed statistic counted (add-one).
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"paired samples differ in length: {len(a)} vs {len(b)}")
    if a.size == 0:
        raise ValueError("empty samples")
    d = a - b
    n = len(d)
    observed = abs(d.mean())
    tol = 1e-12 * max(1.0, float(np.abs(d).max()))
    if exact is None:
        exact = n <= 20
    if exact:
        return _exact_count(d, observed, tol) / 2.0 ** n
    rng = np.random.default_rng(seed)
    hits = 0
    for start in range(0, n_permutations, 1000):
        m = min(1000, n_permutations - start)
        signs = rng.choice((-1.0, 1.0), size=(m, n))
        hits += int(np.sum(np.abs(signs @ d / n) >= observed - tol))
    return (hits + 1) / (n_permutations + 1)


# -- bias probe ------------------------------------------------------------------

def majority_threshold(group_size: int) -> int:
    """ceil(2n/3) in integer arithmetic."""
    return (2 * group_size + 2) // 3


@dataclass(frozen=True)
class ProbePair:
    group: int
    true_item: int
    fake_a: int
    fake_b: int


@dataclass
class ProbeSet:
    pairs: list[ProbePair]
    skipped: int = 0
    skip_reasons: dict[str, int] = field(default_factory=dict)


def build_bias_probe(train: InteractionDataset, cases: Sequence[TestCase]) -> ProbeSet:
    """Two majority-preferred decoys per held-out group item.

    A decoy is any item that is not a positive of the group (train or test)
    and that at least ceil(2|G|/3) members interacted with in train. The two
    with highest member coverage are taken, ties by lowest item id.
    """
    user_items = train.user_items()
    group_cases = [c for c in cases if c.kind == "group"]
    positives = {t: set(items) for t, items in enumerate(train.group_items)}
    for c in group_cases:
        positives.setdefault(c.entity, set()).add(c.item)
    probe = ProbeSet([])
    for c in group_cases:
        members = train.members[c.entity]
        coverage = np.zeros(train.n_items, dtype=np.int64)
        for u in members:
            coverage[user_items[u]] += 1
        coverage[list(positives[c.entity])] = 0
        need = majority_threshold(len(members))
        candidates = np.flatnonzero(coverage >= need)
        if len(candidates) < 2:
            probe.skipped += 1
            reason = "fewer than two majority items"
            probe.skip_reasons[reason] = probe.skip_reasons.get(reason, 0) + 1
            continue
        best = candidates[np.lexsort((candidates, -coverage[candidates]))][:2]
        probe.pairs.append(ProbePair(c.entity, c.item, int(best[0]), int(best[1])))
    return probe


@dataclass(frozen=True)
class GapRow:
    group: int
    true_item: int
    fake_item: int
    rank_true: int
    rank_fake: int

    @property
    def gap(self) -> int:
        return self.rank_fake - self.rank_true


@dataclass
class RankGapReport:
    rows: list[GapRow]
    mean: float
    median: float
    histogram: list[tuple[int, int, int]]  # (lower edge, upper edge, count)


def gap_histogram(gaps: Sequence[int], width: int = 50) -> list[tuple[int, int, int]]:
    if not len(gaps):
        return []
    bins = np.floor_divide(np.asarray(gaps), width)
    lo, hi = int(bins.min()), int(bins.max())
    counts = np.bincount(bins - lo, minlength=hi - lo + 1)
    return [((lo + i) * width, (lo + i + 1) * width, int(n)) for i, n in enumerate(counts)]


def compute_rank_gap(out: ForwardOutput, probe: ProbeSet, width: int = 50) -> RankGapReport:
    """Rank_fake - Rank_true for every decoy, ranking all items without exclusion."""
    rows = []
    for p in probe.pairs:
        scores = entity_scores(out, "group", p.group)
        true_rank = rank_of(scores, p.true_item)
        for fake in (p.fake_a, p.fake_b):
            rows.append(GapRow(p.group, p.true_item, fake, true_rank, rank_of(scores, fake)))
    gaps = [r.gap for r in rows]
    mean = float(np.mean(gaps)) if gaps else math.nan
    median = float(np.median(gaps)) if gaps else math.nan
    return RankGapReport(rows, mean, median, gap_histogram(gaps, width))
