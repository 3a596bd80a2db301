"""Graph structures built from a training split.

Node order for the user/item graphs is users first, then items
(item ``j`` lives at row ``n_users + j``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .data import DatasetError, InteractionDataset
from .numerics import SparseMatrix


def _inv_sqrt(deg: np.ndarray) -> np.ndarray:
    out = np.zeros_like(deg, dtype=np.float64)
    nz = deg > 0
    out[nz] = deg[nz] ** -0.5
    return out


def _inv(deg: np.ndarray) -> np.ndarray:
    out = np.zeros_like(deg, dtype=np.float64)
    nz = deg > 0
    out[nz] = 1.0 / deg[nz]
    return out


def symmetric_normalize(adj) -> SparseMatrix:
    """D^-1/2 A D^-1/2 with weighted degrees; zero-degree rows stay zero."""
    adj = sp.csr_matrix(adj, dtype=np.float64)
    scale = sp.diags(_inv_sqrt(np.asarray(adj.sum(axis=1)).ravel()))
    return SparseMatrix.from_scipy(scale @ adj @ scale)


def build_preference_adjacency(train: InteractionDataset) -> SparseMatrix:
    """Normalized user-item bipartite adjacency over ``n_users + n_items`` nodes."""
    M, N = train.n_users, train.n_items
    u, j = train.user_item[:, 0], train.user_item[:, 1] + M
    rows = np.concatenate([u, j])
    cols = np.concatenate([j, u])
    adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(M + N, M + N))
    return symmetric_normalize(adj)


def hyperedges(train: InteractionDataset, members_only: bool = False) -> list[np.ndarray]:
    """Node set of each group's hyperedge: its members plus (offset) items."""
    M = train.n_users
    edges = []
    for t, members in enumerate(train.members):
        nodes = list(members)
        if not members_only:
            nodes += [M + j for j in train.group_items[t]]
        edges.append(np.array(sorted(nodes), dtype=np.int64))
    return edges


@dataclass(frozen=True, eq=False)
class SocialHypergraph:
    incidence: SparseMatrix  # (M+N) x K
    edge_weights: np.ndarray  # K
    vertex_degree: np.ndarray  # M+N
    edge_degree: np.ndarray  # K
    neighbors: tuple[np.ndarray, ...]  # per user, sorted
    spread: SparseMatrix  # D^-1 H W B^-1
    collect: SparseMatrix  # H^T

    @property
    def n_users(self) -> int:
        return len(self.neighbors)

    def social_edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Directed (target user, neighbor) arrays covering both directions."""
        src = np.concatenate([np.full(len(n), i, dtype=np.int64) for i, n in enumerate(self.neighbors)]
                             or [np.zeros(0, dtype=np.int64)])
        dst = np.concatenate(list(self.neighbors) or [np.zeros(0, dtype=np.int64)])
        return src, dst.astype(np.int64)

    def operator(self) -> SparseMatrix:
        """The full smoothing operator D^-1 H W B^-1 H^T."""
        return SparseMatrix.from_scipy(self.spread.to_scipy() @ self.collect.to_scipy())


def build_social_hypergraph(train: InteractionDataset, edge_weights: np.ndarray | None = None) -> SocialHypergraph:
    M, N, K = train.n_users, train.n_items, train.n_groups
    edges = hyperedges(train)
    for t, nodes in enumerate(edges):
        if len(nodes) == 0:
            raise DatasetError(f"group {t} has an empty hyperedge")
    rows = np.concatenate(edges) if edges else np.zeros(0, dtype=np.int64)
    cols = np.repeat(np.arange(K), [len(e) for e in edges])
    H = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(M + N, K))
    w = np.ones(K) if edge_weights is None else np.asarray(edge_weights, dtype=np.float64)
    vertex_degree = np.asarray(H @ w).ravel()
    edge_degree = np.asarray(H.sum(axis=0)).ravel()
    spread = sp.diags(_inv(vertex_degree)) @ H @ sp.diags(w * _inv(edge_degree))
    return SocialHypergraph(
        incidence=SparseMatrix.from_scipy(H),
        edge_weights=w,
        vertex_degree=vertex_degree,
        edge_degree=edge_degree,
        neighbors=tuple(train.neighbors()),
        spread=SparseMatrix.from_scipy(spread),
        collect=SparseMatrix.from_scipy(H.T),
    )


@dataclass(frozen=True, eq=False)
class CooccurrenceGraph:
    adjacency: SparseMatrix  # K x K Jaccard weights, zero diagonal
    normalized: SparseMatrix


def build_cooccurrence_graph(train: InteractionDataset, members_only: bool = False) -> CooccurrenceGraph:
    """Groups linked by the Jaccard overlap of their hyperedge node sets."""
    M, N, K = train.n_users, train.n_items, train.n_groups
    edges = hyperedges(train, members_only=members_only)
    rows = np.concatenate(edges) if edges else np.zeros(0, dtype=np.int64)
    cols = np.repeat(np.arange(K), [len(e) for e in edges])
    H = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(M + N, K))
    inter = (H.T @ H).tocoo()
    sizes = np.array([len(e) for e in edges], dtype=np.float64)
    keep = (inter.row != inter.col) & (inter.data > 0)
    p, q, common = inter.row[keep], inter.col[keep], inter.data[keep]
    weights = common / (sizes[p] + sizes[q] - common)
    A = sp.coo_matrix((weights, (p, q)), shape=(K, K))
    return CooccurrenceGraph(SparseMatrix.from_scipy(A), symmetric_normalize(A))


@dataclass(frozen=True, eq=False)
class Graphs:
    """Everything the forward pass needs that depends only on the train split."""

    n_users: int
    n_items: int
    n_groups: int
    preference: SparseMatrix
    hypergraph: SocialHypergraph
    cooccurrence: CooccurrenceGraph
    member_index: np.ndarray  # flat member user ids, grouped by group
    member_group: np.ndarray  # group id of each member_index entry

    def members_of(self, t: int) -> np.ndarray:
        return self.member_index[self.member_group == t]


def build_graphs(train: InteractionDataset, cooccurrence_members_only: bool = False) -> Graphs:
    member_index = np.concatenate([np.array(m, dtype=np.int64) for m in train.members]) \
        if train.members else np.zeros(0, dtype=np.int64)
    member_group = np.repeat(np.arange(train.n_groups), [len(m) for m in train.members])
    return Graphs(
        n_users=train.n_users,
        n_items=train.n_items,
        n_groups=train.n_groups,
        preference=build_preference_adjacency(train),
        hypergraph=build_social_hypergraph(train),
        cooccurrence=build_cooccurrence_graph(train, members_only=cooccurrence_members_only),
        member_index=member_index,
        member_group=member_group.astype(np.int64),
    )
