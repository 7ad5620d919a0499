"""Full architecture: embedding, stacked (delegate attention + TCN) blocks,
language-model head, loss/perplexity, and autoregressive generation."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import attention as att
from . import tcn as tcn_mod
from . import tensor as T
from .encoding import EOS, PAD, VOCAB, decode, embed, encode
from .tensor import Tensor


@dataclass
class ModelConfig:
    embedding_dim: int = 1024
    num_layers: int = 20
    num_heads: int = 4
    mlp_ratio: int = 2
    dropout_rate: float = 0.15
    attention_dropout: float = 0.1
    stochastic_depth_rate: float = 0.15
    patch_min: int = 16
    patch_max: int = 32
    final_patch: int | None = 1024
    final_patch_layers: int = 2
    loops_per_layer: int = 1
    tcn_kernel: int = 3
    tcn_dilations: tuple = (1, 2, 4)
    delegate_mode: str = "mean"
    tie_lm_head: bool = False
    init_std: float = 0.02
    vocab: int = VOCAB

    def __post_init__(self):
        if self.vocab != VOCAB:
            raise ValueError(f"vocabulary is fixed at {VOCAB}")
        if self.embedding_dim % self.num_heads:
            raise ValueError("embedding_dim must be divisible by num_heads")
        if not 1 <= self.patch_min <= self.patch_max:
            raise ValueError("need 1 <= patch_min <= patch_max")
        self.tcn_dilations = tuple(self.tcn_dilations)


PRESETS = {
    "paper": ModelConfig(),
    "desk": ModelConfig(
        embedding_dim=64,
        num_layers=2,
        num_heads=2,
        patch_min=4,
        patch_max=8,
        final_patch=None,
        final_patch_layers=0,
        loops_per_layer=2,
        dropout_rate=0.05,
        attention_dropout=0.0,
        stochastic_depth_rate=0.0,
    ),
}


def config_from_dict(d: dict) -> ModelConfig:
    d = dict(d)
    preset = d.pop("preset", None)
    base = PRESETS[preset] if preset else ModelConfig()
    return replace(base, **d)


def load_model_config(path: str) -> ModelConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def config_to_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["tcn_dilations"] = list(cfg.tcn_dilations)
    return d


@dataclass
class ModelParams:
    embedding: Tensor  # [D, 259]
    layers: list  # of (McLayerParams, TcnParams)
    lm_head: Tensor | None  # [259, D]; None when tied to the embedding
    dtype: object = np.float64

    def named_tensors(self) -> dict:
        out = {"embedding": self.embedding}
        for i, (attn, ff) in enumerate(self.layers):
            for name, t in attn.tensors().items():
                out[f"layer{i}.attn.{name}"] = t
            for name, t in ff.tensors().items():
                out[f"layer{i}.tcn.{name}"] = t
        if self.lm_head is not None:
            out["lm_head"] = self.lm_head
        return out

    def param_count(self) -> int:
        return sum(t.size for t in self.named_tensors().values())

    def replace_tensor(self, name: str, tensor: Tensor) -> None:
        """Swap the named parameter object (grad-check plumbing)."""
        if name == "embedding":
            self.embedding = tensor
            return
        if name == "lm_head":
            self.lm_head = tensor
            return
        layer_part, kind, field_name = name.split(".")
        attn, ff = self.layers[int(layer_part.removeprefix("layer"))]
        if kind == "attn":
            setattr(attn, field_name, tensor)
        elif field_name.startswith("conv"):
            ff.layers[int(field_name.removeprefix("conv"))] = tensor
        else:
            setattr(ff, field_name, tensor)


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> ModelParams:
    rng = np.random.default_rng(seed)
    dim, std = cfg.embedding_dim, cfg.init_std
    embedding = T.parameter(rng.normal(0.0, std, size=(dim, VOCAB)), dtype=dtype)
    layers = []
    for _ in range(cfg.num_layers):
        attn = att.init_mc_params(dim, cfg.num_heads, rng, dtype=dtype, std=std)
        ff = tcn_mod.init_tcn_params(dim, cfg.mlp_ratio, cfg.tcn_kernel, cfg.tcn_dilations,
                                     rng, dtype=dtype, std=std)
        layers.append((attn, ff))
    lm_head = None if cfg.tie_lm_head else T.parameter(
        rng.normal(0.0, std, size=(VOCAB, dim)), dtype=dtype)
    return ModelParams(embedding=embedding, layers=layers, lm_head=lm_head, dtype=dtype)


def layer_patch_size(cfg: ModelConfig, layer_idx: int, mode: str, rng=None) -> int:
    """Patch size schedule: the last final_patch_layers use the large patch,
    training draws the rest uniformly from [patch_min, patch_max], eval fixes
    the midpoint for determinism."""
    if cfg.final_patch and layer_idx >= cfg.num_layers - cfg.final_patch_layers:
        return cfg.final_patch
    if mode == "train" and cfg.patch_min < cfg.patch_max:
        return int(rng.integers(cfg.patch_min, cfg.patch_max + 1))
    return (cfg.patch_min + cfg.patch_max) // 2


def forward(tokens, cfg: ModelConfig, params: ModelParams, mode: str = "eval", rng=None) -> Tensor:
    """Token ids -> logits[L, 259]; position t sees only tokens[0..t]."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size < 1:
        raise ValueError("forward needs at least one token")
    train = mode == "train"
    x = embed(tokens, params.embedding)
    pad_vec = T.narrow(params.embedding, 1, PAD, 1)
    sd = cfg.stochastic_depth_rate if train else 0.0
    for idx, (attn_p, tcn_p) in enumerate(params.layers):
        p = layer_patch_size(cfg, idx, mode, rng)
        if sd > 0.0 and rng.random() < sd:
            continue
        branch_scale = 1.0 / (1.0 - sd) if sd > 0.0 else 1.0
        plan = att.make_plan(len(tokens), p)
        x = att.mc_layer(
            x, attn_p, plan,
            loops=cfg.loops_per_layer, mode=mode, rng=rng,
            attn_dropout=cfg.attention_dropout, resid_dropout=cfg.dropout_rate,
            pad_vec=pad_vec, branch_scale=branch_scale,
            delegate_mode=cfg.delegate_mode,
        )
        x = tcn_mod.tcn_block(x, tcn_p, mode=mode, rng=rng,
                              dropout_rate=cfg.dropout_rate, branch_scale=branch_scale)
    head = T.transpose(params.embedding) if params.lm_head is None else params.lm_head
    return T.transpose(T.matmul(head, x))


def loss_and_ppl(logits: Tensor, targets, ignore=frozenset({PAD})) -> tuple[float, float]:
    """Mean next-token NLL over non-ignored positions and its exp."""
    nll = T.cross_entropy(logits, targets, ignore=ignore).item()
    return nll, math.exp(nll)


def _parse_policy(policy: str):
    if policy == "greedy":
        return "greedy", None
    kind, _, arg = policy.partition(":")
    if kind == "temp" and arg:
        return "temp", float(arg)
    if kind == "topk" and arg:
        return "topk", int(arg)
    raise ValueError(f"unknown decoding policy {policy!r}")


def generate(prompt: bytes, cfg: ModelConfig, params: ModelParams, policy: str = "greedy",
             max_new: int = 64, seed: int = 0) -> bytes:
    """Autoregressive continuation of a byte prompt; stops at EOS or max_new."""
    if max_new < 1:
        raise ValueError("max_new must be >= 1")
    kind, arg = _parse_policy(policy)
    rng = np.random.default_rng(seed)
    tokens = encode(prompt, add_bos=not prompt).tolist()
    new = []
    with T.no_grad():
        for _ in range(max_new):
            logits = forward(tokens, cfg, params, mode="eval").data[-1]
            if kind == "greedy":
                nxt = int(np.argmax(logits))
            elif kind == "temp":
                z = (logits - logits.max()) / max(arg, 1e-9)
                p = np.exp(z)
                p /= p.sum()
                nxt = int(rng.choice(VOCAB, p=p))
            else:  # topk
                k = max(1, min(arg, VOCAB))
                top = np.argsort(logits)[-k:]
                z = logits[top] - logits[top].max()
                p = np.exp(z)
                p /= p.sum()
                nxt = int(top[rng.choice(k, p=p)])
            if nxt == EOS:
                break
            new.append(nxt)
            tokens.append(nxt)
    return decode(new)
