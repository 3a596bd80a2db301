"""Forward pass: disentangled embeddings, three propagation schemes, attention
and gate aggregation.

All representation matrices are row-major: one row per user, item or group.
Weight matrices act on row vectors from the right (``x @ W``).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .config import TrainConfig
from .graphs import CooccurrenceGraph, Graphs, SocialHypergraph
from .numerics import ContractError, SparseMatrix, Tensor


@dataclass
class ModelParams:
    user_pref: Tensor  # M x d
    user_social: Tensor  # M x d
    item_pref: Tensor  # N x d
    item_social: Tensor  # N x d
    group: Tensor  # K x 2d
    psi: list[Tensor]  # L x (d x d), hypergraph layer transforms
    social_w: Tensor  # d x d
    social_h: Tensor  # d
    member_w: Tensor  # 2d x 2d
    member_h: Tensor  # 2d
    gate_wm: Tensor  # 2d x 2d (2d x 1 for a scalar gate)
    gate_wt: Tensor
    gate_b: Tensor  # 2d (1 for a scalar gate)
    ssl_w: Tensor  # 2d x 2d

    def named(self) -> dict[str, Tensor]:
        out = {}
        for name in ("user_pref", "user_social", "item_pref", "item_social", "group"):
            out[name] = getattr(self, name)
        for l, p in enumerate(self.psi):
            out[f"psi_{l}"] = p
        for name in ("social_w", "social_h", "member_w", "member_h", "gate_wm", "gate_wt", "gate_b", "ssl_w"):
            out[name] = getattr(self, name)
        return out

    def trainable(self, variant: str) -> list[Tensor]:
        frozen = set()
        if variant == "no-social":
            frozen = {"user_social", "item_social", "social_w", "social_h"} | {f"psi_{l}" for l in range(len(self.psi))}
        elif variant == "no-pref":
            frozen = {"user_pref", "item_pref"}
        return [t for name, t in self.named().items() if name not in frozen]

    @classmethod
    def from_named(cls, tensors: dict[str, Tensor]) -> "ModelParams":
        n_layers = sum(1 for k in tensors if k.startswith("psi_"))
        kw = {k: v for k, v in tensors.items() if not k.startswith("psi_")}
        return cls(psi=[tensors[f"psi_{l}"] for l in range(n_layers)], **kw)


def expected_shapes(n_users: int, n_items: int, n_groups: int, config: TrainConfig) -> dict[str, tuple[int, ...]]:
    d = config.embedding_size
    g = 1 if config.gate == "scalar" else 2 * d
    shapes = {
        "user_pref": (n_users, d), "user_social": (n_users, d),
        "item_pref": (n_items, d), "item_social": (n_items, d),
        "group": (n_groups, 2 * d),
    }
    shapes.update({f"psi_{l}": (d, d) for l in range(config.layers)})
    shapes.update({
        "social_w": (d, d), "social_h": (d,),
        "member_w": (2 * d, 2 * d), "member_h": (2 * d,),
        "gate_wm": (2 * d, g), "gate_wt": (2 * d, g), "gate_b": (g,),
        "ssl_w": (2 * d, 2 * d),
    })
    return shapes


def init_params(n_users: int, n_items: int, n_groups: int, config: TrainConfig,
                rng: np.random.Generator) -> ModelParams:
    """Uniform(-1/sqrt(d), 1/sqrt(d)) for everything except the zero gate bias."""
    scale = 1.0 / np.sqrt(config.embedding_size)
    tensors = {}
    for name, shape in expected_shapes(n_users, n_items, n_groups, config).items():
        if name == "gate_b":
            data = np.zeros(shape)
        else:
            data = rng.uniform(-scale, scale, size=shape)
        if config.variant == "no-social" and name in ("user_social", "item_social"):
            data = np.zeros(shape)
        if config.variant == "no-pref" and name in ("user_pref", "item_pref"):
            data = np.zeros(shape)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    return ModelParams.from_named(tensors)


# -- propagation ---------------------------------------------------------------

Dropout = Callable[[Tensor], Tensor]


def _layer_mean(layers: list[Tensor]) -> Tensor:
    total = layers[0]
    for x in layers[1:]:
        total = total + x
    return total * (1.0 / len(layers))


def propagate_preference(x0: Tensor, adj: SparseMatrix, layers: int, drop: Dropout | None = None) -> Tensor:
    """LightGCN-style propagation, averaged over layers 0..L."""
    if layers < 0:
        raise ContractError("layers must be >= 0")
    if x0.shape[0] != adj.cols:
        raise ContractError(f"embedding rows {x0.shape[0]} do not match adjacency {adj.shape}")
    out = [x0]
    for _ in range(layers):
        x = nx.spmm(adj, out[-1])
        out.append(drop(x) if drop else x)
    return _layer_mean(out)


def social_attention(users: Tensor, src: np.ndarray, dst: np.ndarray, w: Tensor, h: Tensor) -> tuple[Tensor, np.ndarray]:
    """Add each user's attention-weighted, transformed friend embeddings.

    ``(src[k], dst[k])`` says user ``dst[k]`` is a friend of ``src[k]``. The
    weight of a friend depends only on the friend's own logit, normalised
    over the target user's neighbourhood. Returns the new rows and the
    per-edge weights.
    """
    if len(src) == 0:
        return users, np.zeros(0)
    proj = nx.matmul(users, w)
    logits = nx.matmul(proj, h)
    alpha = nx.segment_softmax(nx.gather(logits, dst), src, users.shape[0])
    message = nx.segment_sum(nx.row_scale(nx.gather(proj, dst), alpha), src, users.shape[0])
    return users + message, alpha.data


def propagate_social_hypergraph(x0: Tensor, hg: SocialHypergraph, psi: list[Tensor], w: Tensor, h: Tensor,
                                layers: int, drop: Dropout | None = None) -> tuple[Tensor, list[np.ndarray]]:
    """Hypergraph convolution with per-layer transform, then social attention
    on the user rows, averaged over layers. Returns the average and each
    layer's attention weights."""
    if layers < 0:
        raise ContractError("layers must be >= 0")
    if layers > len(psi):
        raise ContractError(f"{layers} layers requested but only {len(psi)} layer transforms")
    if x0.shape[0] != hg.spread.rows:
        raise ContractError(f"embedding rows {x0.shape[0]} do not match hypergraph {hg.spread.rows}")
    M = hg.n_users
    src, dst = hg.social_edges()
    out = [x0]
    alphas = []
    for l in range(layers):
        x = nx.matmul(nx.spmm(hg.spread, nx.spmm(hg.collect, out[-1])), psi[l])
        users, alpha = social_attention(nx.slice_rows(x, 0, M), src, dst, w, h)
        alphas.append(alpha)
        if len(src):
            x = nx.concat([users, nx.slice_rows(x, M, x.shape[0])], axis=0)
        out.append(drop(x) if drop else x)
    return _layer_mean(out), alphas


def aggregate_user_level(users: Tensor, member_index: np.ndarray, member_group: np.ndarray, n_groups: int,
                         w: Tensor, h: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Attention pooling of member representations per group.

    Returns ``(groups, beta, proj, logits)``; ``proj``/``logits`` are the
    per-user projected rows and attention logits, reused for SSL views.
    """
    counts = np.bincount(member_group, minlength=n_groups)
    if np.any(counts == 0):
        raise ContractError(f"group {int(np.argmin(counts))} has no members")
    proj = nx.matmul(users, w)
    logits = nx.matmul(proj, h)
    beta = nx.segment_softmax(nx.gather(logits, member_index), member_group, n_groups)
    groups = nx.segment_sum(nx.row_scale(nx.gather(proj, member_index), beta), member_group, n_groups)
    return groups, beta, proj, logits


def pool_members(proj: Tensor, logits: Tensor, member_index: np.ndarray, member_group: np.ndarray,
                 n_groups: int) -> Tensor:
    """Attention pooling from precomputed projections (softmax renormalised
    over whichever members are listed)."""
    beta = nx.segment_softmax(nx.gather(logits, member_index), member_group, n_groups)
    return nx.segment_sum(nx.row_scale(nx.gather(proj, member_index), beta), member_group, n_groups)


def propagate_cooccurrence(g0: Tensor, cg: CooccurrenceGraph, layers: int, drop: Dropout | None = None) -> Tensor:
    return propagate_preference(g0, cg.normalized, layers, drop)


def gate_fuse(gm: Tensor, gt: Tensor, wm: Tensor, wt: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """gamma = sigmoid(gm Wm + gt Wt + b); fused = gamma*gm + (1-gamma)*gt.

    With ``(2d, 1)`` weights and a length-1 bias the gate is one scalar per group.
    """
    if gm.shape != gt.shape:
        raise ContractError(f"gate inputs differ in shape: {gm.shape} vs {gt.shape}")
    gamma = nx.sigmoid(nx.matmul(gm, wm) + nx.matmul(gt, wt) + b)
    fused = gamma * gm + (1.0 - gamma) * gt
    return fused, gamma


def score(e, i) -> float:
    e, i = np.asarray(e, dtype=np.float64), np.asarray(i, dtype=np.float64)
    if e.shape != i.shape:
        raise ContractError(f"score: {e.shape} vs {i.shape}")
    return float(e @ i)


# -- full forward ----------------------------------------------------------------

@dataclass
class ForwardOutput:
    users: Tensor  # M x 2d
    items: Tensor  # N x 2d
    group_member: Tensor  # K x 2d, user-level group representation
    group_level: Tensor  # K x 2d, co-occurrence representation
    groups: Tensor  # K x 2d, gate-fused
    beta: np.ndarray  # aligned with Graphs.member_index
    alpha: list[np.ndarray]  # per layer, aligned with SocialHypergraph.social_edges()
    gamma: np.ndarray
    member_proj: Tensor
    member_logits: Tensor

    def beta_of(self, graphs: Graphs, t: int) -> np.ndarray:
        return self.beta[graphs.member_group == t]


def forward(params: ModelParams, graphs: Graphs, config: TrainConfig, training: bool = False,
            rng: np.random.Generator | None = None) -> ForwardOutput:
    M, N, K = graphs.n_users, graphs.n_items, graphs.n_groups
    d = config.embedding_size
    L = config.layers
    drop = None
    if training and config.dropout > 0:
        if rng is None:
            raise ContractError("training with dropout needs a random generator")
        drop = lambda x: nx.dropout(x, config.dropout, rng)  # noqa: E731

    if config.variant == "no-pref":
        pref = Tensor(np.zeros((M + N, d)))
    else:
        pref = propagate_preference(nx.concat([params.user_pref, params.item_pref], axis=0),
                                    graphs.preference, L, drop)
    alphas: list[np.ndarray] = []
    if config.variant == "no-social":
        social = Tensor(np.zeros((M + N, d)))
    else:
        social, alphas = propagate_social_hypergraph(
            nx.concat([params.user_social, params.item_social], axis=0), graphs.hypergraph,
            params.psi, params.social_w, params.social_h, L, drop)

    users = nx.concat([nx.slice_rows(pref, 0, M), nx.slice_rows(social, 0, M)], axis=1)
    items = nx.concat([nx.slice_rows(pref, M, M + N), nx.slice_rows(social, M, M + N)], axis=1)
    gm, beta, proj, logits = aggregate_user_level(users, graphs.member_index, graphs.member_group, K,
                                                  params.member_w, params.member_h)
    gt = propagate_cooccurrence(params.group, graphs.cooccurrence, L, drop)
    groups, gamma = gate_fuse(gm, gt, params.gate_wm, params.gate_wt, params.gate_b)
    return ForwardOutput(users, items, gm, gt, groups, beta.data, alphas, gamma.data, proj, logits)


# -- checkpoints -------------------------------------------------------------------

_MAGIC = b"DISRECK1"


def save_checkpoint(path, params: ModelParams, config: TrainConfig, counts: tuple[int, int, int]) -> None:
    """Header (magic, u64 length, JSON with config and tensor shapes) followed
    by every tensor as little-endian float64 in header order."""
    named = params.named()
    header = {
        "config": config.to_dict(),
        "counts": {"users": counts[0], "items": counts[1], "groups": counts[2]},
        "tensors": [{"name": k, "shape": list(t.shape)} for k, t in named.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for t in named.values():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_checkpoint(path, config: TrainConfig | None = None,
                    counts: tuple[int, int, int] | None = None) -> tuple[ModelParams, dict]:
    """Read a checkpoint; when ``config``/``counts`` are given the stored
    shapes must match what they imply."""
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + n].decode("utf-8"))
    offset = 16 + n
    tensors = {}
    for spec in header["tensors"]:
        shape = tuple(spec["shape"])
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).reshape(shape)
        offset += 8 * size
        tensors[spec["name"]] = Tensor(data.astype(np.float64), requires_grad=True, name=spec["name"])
    if offset != len(raw):
        raise ContractError(f"{path}: trailing or missing tensor data")
    if config is not None:
        c = header["counts"]
        expected = expected_shapes(*(counts or (c["users"], c["items"], c["groups"])), config)
        actual = {k: t.shape for k, t in tensors.items()}
        if actual != expected:
            bad = sorted(k for k in set(expected) | set(actual) if expected.get(k) != actual.get(k))
            raise ContractError(f"{path}: tensor shapes do not match the configuration ({', '.join(bad)})")
    return ModelParams.from_named(tensors), header
