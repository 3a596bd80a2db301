"""Negative sampling, the three loss terms and the epoch loop."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .config import TrainConfig
from .data import InteractionDataset, TestCase
from .graphs import Graphs, build_graphs
from .model import ForwardOutput, ModelParams, forward, gate_fuse, init_params, pool_members
from .numerics import Adam, NonFiniteError, Tape, Tensor

log = logging.getLogger(__name__)


class NonFiniteLossError(NonFiniteError):
    def __init__(self, epoch: int, batch: int, components: dict[str, float]):
        detail = ", ".join(f"{k}={v}" for k, v in components.items())
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {detail}")
        self.epoch = epoch
        self.batch = batch
        self.components = components


# -- negatives -------------------------------------------------------------------

class PositiveIndex:
    """Sorted train positives per user and per group."""

    def __init__(self, train: InteractionDataset):
        self.n_items = train.n_items
        self.lists = {"user": train.user_items(), "group": train.group_item_lists()}
        self.sets = {k: [set(x.tolist()) for x in v] for k, v in self.lists.items()}

    def positives(self, kind: str, entity: int) -> np.ndarray:
        return self.lists[kind][entity]


def sample_negatives(index: PositiveIndex, kind: str, entity: int, n: int,
                     rng: np.random.Generator) -> np.ndarray:
    """``n`` items drawn uniformly, with replacement, from the entity's non-positives."""
    pos = index.sets[kind][entity]
    n_free = index.n_items - len(pos)
    if n_free <= 0:
        raise ValueError(f"{kind} {entity} has interacted with every item")
    if len(pos) > index.n_items // 2:
        free = np.setdiff1d(np.arange(index.n_items), index.lists[kind][entity])
        return free[rng.integers(0, len(free), size=n)]
    out = rng.integers(0, index.n_items, size=n)
    while True:
        bad = [k for k, j in enumerate(out) if int(j) in pos]
        if not bad:
            return out
        out[bad] = rng.integers(0, index.n_items, size=len(bad))


# -- losses ----------------------------------------------------------------------

def pairwise_loss(pos: Tensor, neg: Tensor) -> Tensor:
    """Sum of (pos - neg - 1)^2: zero exactly when every margin equals one."""
    return nx.sum(nx.square(pos - neg - 1.0))


def select_extremes(beta: np.ndarray) -> tuple[int, int]:
    """Positions of the most and least influential member.

    Ties go to the lowest position; if every weight ties the last member is
    taken as least influential so the two always differ.
    """
    if len(beta) < 2:
        raise ValueError("need at least two members")
    top = int(np.argmax(beta))
    bottom = int(np.argmin(beta))
    if top == bottom:
        bottom = len(beta) - 1
    return top, bottom


@dataclass
class SSLViews:
    groups: np.ndarray  # eligible group ids
    anchor: Tensor  # fused representation of each group
    without_top: Tensor  # most influential member removed
    without_bottom: Tensor  # least influential member removed


def build_ssl_views(out: ForwardOutput, params: ModelParams, graphs: Graphs,
                    groups: Sequence[int] | None = None) -> SSLViews | None:
    """Member-removal views for every group with at least two members.

    Removal re-runs attention pooling over the remaining members and the
    gate, keeping the group-level term fixed. Returns None when no group
    qualifies.
    """
    candidates = range(graphs.n_groups) if groups is None else sorted(set(int(t) for t in groups))
    eligible, keep_top, keep_bottom = [], [], []
    for t in candidates:
        mask = graphs.member_group == t
        members = graphs.member_index[mask]
        if len(members) < 2:
            continue
        top, bottom = select_extremes(out.beta[mask])
        eligible.append(t)
        keep_top.append(np.delete(members, top))
        keep_bottom.append(np.delete(members, bottom))
    if not eligible:
        return None
    eligible = np.array(eligible, dtype=np.int64)
    gt = nx.gather(out.group_level, eligible)

    def view(kept: list[np.ndarray]) -> Tensor:
        idx = np.concatenate(kept)
        seg = np.repeat(np.arange(len(kept)), [len(k) for k in kept])
        gm = pool_members(out.member_proj, out.member_logits, idx, seg, len(kept))
        fused, _ = gate_fuse(gm, gt, params.gate_wm, params.gate_wt, params.gate_b)
        return fused

    return SSLViews(eligible, nx.gather(out.groups, eligible), view(keep_top), view(keep_bottom))


def ssl_loss(anchor: Tensor, positive: Tensor, negative: Tensor, w: Tensor, double_sigmoid: bool = True) -> Tensor:
    """-sum[log s(f(g, g')) + log s(1 - f(g, g''))] with f(a, b) = s(a W b)."""
    anchor_w = nx.matmul(anchor, w)
    f_pos = nx.row_dot(anchor_w, positive)
    f_neg = nx.row_dot(anchor_w, negative)
    if double_sigmoid:
        f_pos, f_neg = nx.sigmoid(f_pos), nx.sigmoid(f_neg)
    return -(nx.sum(nx.log_sigmoid(f_pos)) + nx.sum(nx.log_sigmoid(1.0 - f_neg)))


def total_loss(user_loss, group_loss, ssl, delta: float):
    return user_loss + group_loss + ssl * delta


# -- batches ---------------------------------------------------------------------

@dataclass
class TrainingBatch:
    kinds: np.ndarray  # 0 user, 1 group
    entities: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray  # (batch, n_neg)


def make_batches(index: PositiveIndex, train: InteractionDataset, config: TrainConfig,
                 rng: np.random.Generator) -> list[TrainingBatch]:
    """Shuffle all user and group positives together and cut them into batches."""
    pairs = np.concatenate([
        np.column_stack([np.zeros(len(train.user_item), dtype=np.int64), train.user_item]),
        np.column_stack([np.ones(len(train.group_item), dtype=np.int64), train.group_item]),
    ])
    pairs = pairs[rng.permutation(len(pairs))]
    batches = []
    for start in range(0, len(pairs), config.batch_size):
        chunk = pairs[start:start + config.batch_size]
        negs = np.stack([
            sample_negatives(index, "user" if k == 0 else "group", int(e), config.negatives, rng)
            for k, e, _ in chunk
        ])
        batches.append(TrainingBatch(chunk[:, 0], chunk[:, 1], chunk[:, 2], negs))
    return batches


@dataclass
class LossTerms:
    user: Tensor
    group: Tensor
    ssl: Tensor
    total: Tensor

    def values(self) -> dict[str, float]:
        return {"loss_user": self.user.item(), "loss_group": self.group.item(),
                "loss_ssl": self.ssl.item(), "loss_total": self.total.item()}


def _pairwise_term(reps: Tensor, items: Tensor, entities, positives, negatives) -> Tensor:
    if len(entities) == 0:
        return Tensor(0.0)
    n_neg = negatives.shape[1]
    ent = nx.gather(reps, np.repeat(entities, n_neg))
    pos = nx.row_dot(ent, nx.gather(items, np.repeat(positives, n_neg)))
    neg = nx.row_dot(ent, nx.gather(items, negatives.reshape(-1)))
    return pairwise_loss(pos, neg)


def batch_loss(params: ModelParams, graphs: Graphs, config: TrainConfig, batch: TrainingBatch,
               training: bool = True, rng: np.random.Generator | None = None,
               ssl_groups: Sequence[int] | None = None) -> LossTerms:
    out = forward(params, graphs, config, training=training, rng=rng)
    u = batch.kinds == 0
    g = ~u
    user = _pairwise_term(out.users, out.items, batch.entities[u], batch.positives[u], batch.negatives[u])
    group = _pairwise_term(out.groups, out.items, batch.entities[g], batch.positives[g], batch.negatives[g])
    delta = config.effective_ssl_weight
    ssl = Tensor(0.0)
    if config.variant != "no-ssl" and delta > 0:
        views = build_ssl_views(out, params, graphs, batch.entities[g] if ssl_groups is None else ssl_groups)
        if views is not None:
            ssl = ssl_loss(views.anchor, views.without_top, views.without_bottom, params.ssl_w,
                           double_sigmoid=config.ssl_sigmoid == "double")
    return LossTerms(user, group, ssl, total_loss(user, group, ssl, delta))


# -- loop ------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    loss_user: float
    loss_group: float
    loss_ssl: float
    loss_total: float
    val_hr5: float | None = None
    seconds: float | None = None


def train(train_ds: InteractionDataset, config: TrainConfig, graphs: Graphs | None = None,
          validation: list[TestCase] | None = None, record_time: bool = False,
          on_epoch: Callable[[EpochLog], None] | None = None) -> tuple[ModelParams, list[EpochLog]]:
    """Adam over shuffled mini-batches; deterministic for a given seed.

    Initialisation, batching/negative sampling and dropout each draw from their
    own stream spawned from ``config.seed``.
    """
    from .evaluation import evaluate_cases  # local: evaluation imports model

    init_seq, sample_seq, drop_seq = np.random.SeedSequence(config.seed).spawn(3)
    sample_rng = np.random.default_rng(sample_seq)
    drop_rng = np.random.default_rng(drop_seq)
    graphs = graphs or build_graphs(train_ds, config.cooccurrence_nodes == "members")
    params = init_params(train_ds.n_users, train_ds.n_items, train_ds.n_groups, config,
                         np.random.default_rng(init_seq))
    opt = Adam(params.trainable(config.variant), lr=config.lr)
    index = PositiveIndex(train_ds)
    logs: list[EpochLog] = []
    group_cases = [c for c in (validation or []) if c.kind == "group"]
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        sums = dict.fromkeys(("loss_user", "loss_group", "loss_ssl", "loss_total"), 0.0)
        for b, batch in enumerate(make_batches(index, train_ds, config, sample_rng)):
            opt.zero_grad()
            with Tape() as tape:
                terms = batch_loss(params, graphs, config, batch, training=True, rng=drop_rng)
            values = terms.values()
            if not all(np.isfinite(v) for v in values.values()):
                raise NonFiniteLossError(epoch, b, values)
            nx.backward(tape, terms.total)
            opt.step()
            for k, v in values.items():
                sums[k] += v
        entry = EpochLog(epoch, **sums)
        if config.eval_every and group_cases and epoch % config.eval_every == 0:
            entry.val_hr5 = evaluate_cases(params, graphs, config, group_cases, index, ks=(5,))["HR@5"]
        if record_time:
            entry.seconds = time.perf_counter() - started
        log.debug("epoch %d: %s", epoch, sums)
        logs.append(entry)
        if on_epoch:
            on_epoch(entry)
    return params, logs
