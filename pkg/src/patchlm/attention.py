"""Patched attention with inter-patch delegate exchange.

A layer splits the sequence into contiguous patches of P embeddings,
summarizes each patch into one delegate vector, redistributes delegates
across patches through the transpose reorganization, and runs masked
multi-head attention over each patch's width-2P augmented context (its own
P columns plus the P delegates routed to its group). Only the local columns
survive the layer; they carry a residual connection. Applying the same
layer repeatedly ("loops") lets information hop between patches, so the
reachable context grows geometrically with depth while per-patch attention
cost stays O(P^2).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


class GroupSizeMismatch(ValueError):
    pass


@dataclass
class PatchPlan:
    """Partition of a length-L sequence into patches of size P."""

    seq_len: int
    patch_size: int
    n_patches: int
    pad_len: int
    group_size: int
    rng_seed: int = 0

    @property
    def padded_len(self) -> int:
        return self.n_patches * self.patch_size

    @property
    def n_groups(self) -> int:
        return -(-self.n_patches // self.group_size)


def make_plan(seq_len: int, patch_size: int, rng_seed: int = 0) -> PatchPlan:
    if patch_size < 1 or seq_len < 1:
        raise ValueError("seq_len and patch_size must be positive")
    n_patches = -(-seq_len // patch_size)
    return PatchPlan(
        seq_len=seq_len,
        patch_size=patch_size,
        n_patches=n_patches,
        pad_len=n_patches * patch_size - seq_len,
        group_size=patch_size,
        rng_seed=rng_seed,
    )


# ---------------------------------------------------------------------------
# reorganization
# ---------------------------------------------------------------------------


def reorganize_indices(n_items: int, patch_size: int) -> np.ndarray:
    """Permutation behind the patch-row transpose.

    Lay n items out as an (n/P, P) matrix, one patch per row, transpose it,
    and flatten row-major. Bijective on positions.
    """
    if n_items % patch_size != 0:
        raise ValueError(f"{n_items} items do not fill patches of {patch_size}")
    return np.arange(n_items).reshape(-1, patch_size).T.reshape(-1)


def reorganize(seq, patch_size: int):
    """Apply the transpose reorganization to any indexable sequence."""
    idx = reorganize_indices(len(seq), patch_size)
    return [seq[i] for i in idx]


def inverse_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv


def delegate_group_sources(n_patches: int, group_size: int) -> np.ndarray:
    """Source patch index per delegate slot, shaped (n_groups, group_size).

    The per-patch delegate sequence is padded to a whole number of groups
    (pad slots are -1), reorganized with the transpose permutation, and cut
    into consecutive blocks; every patch in group g receives block g.
    """
    n_groups = -(-n_patches // group_size)
    padded = np.full(n_groups * group_size, -1, dtype=np.int64)
    padded[:n_patches] = np.arange(n_patches)
    shuffled = padded[reorganize_indices(len(padded), group_size)]
    return shuffled.reshape(n_groups, group_size)


# ---------------------------------------------------------------------------
# layer parameters
# ---------------------------------------------------------------------------


@dataclass
class McLayerParams:
    delegate_kernel: Tensor  # [D, D] 1x1 convolution over patch summaries
    w_q: Tensor  # [D, D]
    w_k: Tensor  # [D, D]
    w_v: Tensor  # [D, D]
    w_o: Tensor  # [D, D] output linear on the attended local columns
    head_count: int

    def __post_init__(self):
        dim = self.w_q.shape[0]
        if dim % self.head_count != 0:
            raise ValueError(f"embedding dim {dim} not divisible by {self.head_count} heads")

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[0] // self.head_count

    def tensors(self):
        return {
            "delegate_kernel": self.delegate_kernel,
            "w_q": self.w_q,
            "w_k": self.w_k,
            "w_v": self.w_v,
            "w_o": self.w_o,
        }


def init_mc_params(dim: int, heads: int, rng, dtype=np.float64, std: float = 0.02) -> McLayerParams:
    def w():
        return T.parameter(rng.normal(0.0, std, size=(dim, dim)), dtype=dtype)

    return McLayerParams(delegate_kernel=w(), w_q=w(), w_k=w(), w_v=w(), w_o=w(), head_count=heads)


# ---------------------------------------------------------------------------
# spec-surface operations (naive per-patch route)
# ---------------------------------------------------------------------------


def partition(x: Tensor, patch_size: int, pad_vec: Tensor | None = None, rng_seed: int = 0):
    """Split x[D, L] into n_patches tensors [D, P]; the tail patch is padded."""
    dim, seq_len = x.shape
    plan = make_plan(seq_len, patch_size, rng_seed)
    if plan.pad_len:
        if pad_vec is None:
            pad_cols = T.zeros((dim, plan.pad_len), dtype=x.dtype)
        else:
            pad_cols = T.repeat(T.reshape(pad_vec, (dim, 1)), 1, plan.pad_len)
        x = T.concat([x, pad_cols], axis=1)
    patches = [T.narrow(x, 1, i * patch_size, patch_size) for i in range(plan.n_patches)]
    return patches, plan


def make_delegates(patches, delegate_kernel: Tensor, mode: str = "mean", rng=None) -> Tensor:
    """One delegate column per patch: the 1x1 kernel applied to a patch summary.

    "mean" pools each patch; "random" picks one column per patch using the
    supplied generator (the Monte Carlo variant).
    """
    if mode == "mean":
        summaries = [T.mean_axis(p, axis=1, keepdims=True) for p in patches]
    elif mode == "random":
        cols = rng.integers(0, patches[0].shape[1], size=len(patches))
        summaries = [T.narrow(p, 1, int(c), 1) for p, c in zip(patches, cols)]
    else:
        raise ValueError(f"unknown delegate mode {mode!r}")
    return T.matmul(delegate_kernel, T.concat(summaries, axis=1))


def augment(patch: Tensor, delegate_group: Tensor) -> Tensor:
    """Concatenate a patch's P local columns with its group's P delegates."""
    if delegate_group.shape != patch.shape:
        raise GroupSizeMismatch(
            f"delegate group {delegate_group.shape} does not match patch {patch.shape}"
        )
    return T.concat([patch, delegate_group], axis=1)


def patch_attention(context: Tensor, params: McLayerParams, mask: np.ndarray,
                    attn_dropout: float = 0.0, rng=None, train: bool = False) -> Tensor:
    """Masked multi-head attention over one augmented context [D, W]."""
    width = context.shape[1]
    if mask.shape != (width, width):
        raise GroupSizeMismatch(f"mask {mask.shape} does not fit context width {width}")
    q = T.matmul(params.w_q, context)
    k = T.matmul(params.w_k, context)
    v = T.matmul(params.w_v, context)
    dk = params.head_dim
    heads = []
    for h in range(params.head_count):
        qh = T.narrow(q, 0, h * dk, dk)
        kh = T.narrow(k, 0, h * dk, dk)
        vh = T.narrow(v, 0, h * dk, dk)
        scores = T.scale(T.matmul(T.transpose(qh), kh), 1.0 / math.sqrt(dk))
        probs = T.softmax_rows(scores, mask=mask)
        probs = T.dropout(probs, attn_dropout, rng=rng, train=train)
        heads.append(T.matmul(probs, T.transpose(vh)))
    return T.transpose(T.concat(heads, axis=1))


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------


def _delegate_allow(sources_flat: np.ndarray, n_patches: int, group_size: int, causal: bool) -> np.ndarray:
    """(n_patches, group_size) allow-matrix for delegate keys per query patch."""
    blocks = sources_flat.reshape(-1, group_size)
    allow = np.zeros((n_patches, group_size), dtype=bool)
    for i in range(n_patches):
        src = blocks[i // group_size]
        if causal:
            allow[i] = (src >= 0) & (src < i)
        else:
            allow[i] = (src >= 0) & (src != i)
    return allow


def layer_masks(plan: PatchPlan, causal: bool = True) -> np.ndarray:
    """(n_patches, 1, P, 2P) allow-mask: causal local keys, earlier-patch delegates."""
    p = plan.patch_size
    sources = delegate_group_sources(plan.n_patches, plan.group_size).reshape(-1)
    local = np.tril(np.ones((p, p), dtype=bool)) if causal else np.ones((p, p), dtype=bool)
    allow_d = _delegate_allow(sources, plan.n_patches, plan.group_size, causal)
    masks = np.zeros((plan.n_patches, 1, p, 2 * p), dtype=bool)
    masks[:, 0, :, :p] = local
    masks[:, 0, :, p:] = allow_d[:, None, :]
    return masks


def full_patch_mask(plan: PatchPlan, patch_idx: int, causal: bool = True) -> np.ndarray:
    """(2P, 2P) mask for the naive route; delegate query rows see only themselves."""
    p = plan.patch_size
    mask = np.zeros((2 * p, 2 * p), dtype=bool)
    mask[:p] = layer_masks(plan, causal=causal)[patch_idx, 0]
    mask[p:, p:] = np.eye(p, dtype=bool)
    return mask


# ---------------------------------------------------------------------------
# the layer
# ---------------------------------------------------------------------------


def _pad_columns(x: Tensor, plan: PatchPlan, pad_vec: Tensor | None) -> Tensor:
    if not plan.pad_len:
        return x
    dim = x.shape[0]
    if pad_vec is None:
        pad_cols = T.zeros((dim, plan.pad_len), dtype=x.dtype)
    else:
        pad_cols = T.repeat(T.reshape(pad_vec, (dim, 1)), 1, plan.pad_len)
    return T.concat([x, pad_cols], axis=1)


def _to_patch_heads(m: Tensor, heads: int, head_dim: int, n_blocks: int, block: int) -> Tensor:
    """[H*dk, n_blocks*block] -> [n_blocks, H, block, dk]."""
    return T.transpose(T.reshape(m, (heads, head_dim, n_blocks, block)), (2, 0, 3, 1))


def mc_layer(x: Tensor, params: McLayerParams, plan: PatchPlan, loops: int = 1,
             mode: str = "eval", rng=None, attn_dropout: float = 0.0,
             resid_dropout: float = 0.0, pad_vec: Tensor | None = None,
             causal: bool = True, branch_scale: float = 1.0,
             delegate_mode: str = "mean") -> Tensor:
    """Apply the delegate-attention layer ``loops`` times to x[D, L].

    Vectorized over patches; numerically equivalent to mc_layer_reference.
    """
    if loops < 1:
        raise ValueError("loops must be >= 1")
    dim, seq_len = x.shape
    heads, dk = params.head_count, params.head_dim
    n_pat, p = plan.n_patches, plan.patch_size
    train = mode == "train"
    sources = delegate_group_sources(n_pat, plan.group_size)
    gather_idx = np.where(sources < 0, n_pat, sources).reshape(-1)
    masks = layer_masks(plan, causal=causal)
    scale = 1.0 / math.sqrt(dk)
    delegate_rng = np.random.default_rng(plan.rng_seed) if delegate_mode == "random" else None

    for _ in range(loops):
        xp = _pad_columns(x, plan, pad_vec)
        if delegate_mode == "mean":
            summaries = T.mean_axis(T.reshape(xp, (dim, n_pat, p)), axis=2)
        else:
            cols = delegate_rng.integers(0, p, size=n_pat)
            summaries = T.index_select(xp, 1, np.arange(n_pat) * p + cols)
        deleg = T.matmul(params.delegate_kernel, summaries)
        deleg_ext = T.concat([deleg, T.zeros((dim, 1), dtype=x.dtype)], axis=1)
        deleg_slots = T.index_select(deleg_ext, 1, gather_idx)  # [D, n_groups*P]

        q = T.matmul(params.w_q, xp)
        k = T.matmul(params.w_k, xp)
        v = T.matmul(params.w_v, xp)
        kd = T.matmul(params.w_k, deleg_slots)
        vd = T.matmul(params.w_v, deleg_slots)

        qp = _to_patch_heads(q, heads, dk, n_pat, p)
        kp = _to_patch_heads(k, heads, dk, n_pat, p)
        vp = _to_patch_heads(v, heads, dk, n_pat, p)
        n_groups = plan.n_groups
        kdp = T.narrow(T.repeat(_to_patch_heads(kd, heads, dk, n_groups, p), 0, p), 0, 0, n_pat)
        vdp = T.narrow(T.repeat(_to_patch_heads(vd, heads, dk, n_groups, p), 0, p), 0, 0, n_pat)

        s_loc = T.bmm(qp, T.transpose(kp, (0, 1, 3, 2)))
        s_del = T.bmm(qp, T.transpose(kdp, (0, 1, 3, 2)))
        scores = T.scale(T.concat([s_loc, s_del], axis=3), scale)
        probs = T.softmax_last(scores, mask=masks)
        probs = T.dropout(probs, attn_dropout, rng=rng, train=train)
        attended = T.add(
            T.bmm(T.narrow(probs, 3, 0, p), vp),
            T.bmm(T.narrow(probs, 3, p, p), vdp),
        )  # [n_pat, H, P, dk]
        flat = T.reshape(T.transpose(attended, (1, 3, 0, 2)), (dim, n_pat * p))
        branch = T.matmul(params.w_o, flat)
        branch = T.dropout(branch, resid_dropout, rng=rng, train=train)
        y = T.add(xp, T.scale(branch, branch_scale))
        x = T.narrow(y, 1, 0, seq_len)
    return x


def mc_layer_reference(x: Tensor, params: McLayerParams, plan: PatchPlan, loops: int = 1,
                       mode: str = "eval", rng=None, attn_dropout: float = 0.0,
                       resid_dropout: float = 0.0, pad_vec: Tensor | None = None,
                       causal: bool = True, branch_scale: float = 1.0,
                       delegate_mode: str = "mean") -> Tensor:
    """Literal per-patch composition of the spec operations (test oracle)."""
    dim, seq_len = x.shape
    p = plan.patch_size
    train = mode == "train"
    sources = delegate_group_sources(plan.n_patches, plan.group_size)
    delegate_rng = np.random.default_rng(plan.rng_seed) if delegate_mode == "random" else None

    for _ in range(loops):
        patches, _ = partition(x, p, pad_vec=pad_vec, rng_seed=plan.rng_seed)
        deleg = make_delegates(patches, params.delegate_kernel, mode=delegate_mode, rng=delegate_rng)
        deleg_ext = T.concat([deleg, T.zeros((dim, 1), dtype=x.dtype)], axis=1)
        outs = []
        for i, patch in enumerate(patches):
            slot_src = sources[i // plan.group_size]
            group = T.index_select(deleg_ext, 1, np.where(slot_src < 0, plan.n_patches, slot_src))
            ctx = augment(patch, group)
            mask = full_patch_mask(plan, i, causal=causal)
            att = patch_attention(ctx, params, mask, attn_dropout=attn_dropout, rng=rng, train=train)
            local = T.narrow(att, 1, 0, p)
            branch = T.matmul(params.w_o, local)
            branch = T.dropout(branch, resid_dropout, rng=rng, train=train)
            outs.append(T.add(patch, T.scale(branch, branch_scale)))
        x = T.narrow(T.concat(outs, axis=1), 1, 0, seq_len)
    return x
