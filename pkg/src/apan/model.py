"""Attention encoder over mailboxes and MLP decoder heads.

All functions operate on batches: a node embedding block is ``(B, d)`` and a
mailbox block is ``(B, m, d)``. Single vectors are accepted where noted and
promoted to a batch of one.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

MAGIC = b"APANCKPT"


@dataclass(frozen=True)
class ModelConfig:
    d: int
    d_e: int
    m: int = 10
    heads: int = 2
    hidden: int = 80
    dropout: float = 0.1
    attn_scale: str = "head"  # "head": sqrt(d_h); "model": sqrt(d)
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"heads={self.heads} must divide d={self.d}")
        if self.attn_scale not in ("head", "model"):
            raise ValueError(f"attn_scale must be 'head' or 'model', got {self.attn_scale!r}")
        if min(self.d, self.d_e, self.m, self.heads, self.hidden) < 1:
            raise ValueError("model dimensions must be positive")

    @property
    def d_head(self) -> int:
        return self.d // self.heads


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)); biases, shift and positions zero; gain one."""
    rng = np.random.default_rng(seed)
    d, h = cfg.d, cfg.hidden
    arrays: dict[str, np.ndarray] = {"pos": np.zeros((cfg.m, d))}
    for k in range(cfg.heads):
        for w in ("wq", "wk", "wv"):
            arrays[f"{w}.{k}"] = _uniform(rng, d, (d, cfg.d_head))
    arrays["wo"] = _uniform(rng, d, (d, d))
    arrays["ln.g"] = np.ones(d)
    arrays["ln.b"] = np.zeros(d)
    heads = {"enc": (d, d), "link": (2 * d, 1), "edge": (2 * d + cfg.d_e, 1), "node": (d, 1)}
    for name, (fan_in, out) in heads.items():
        arrays[f"{name}.w1"] = _uniform(rng, fan_in, (fan_in, h))
        arrays[f"{name}.b1"] = np.zeros(h)
        arrays[f"{name}.w2"] = _uniform(rng, h, (h, out))
        arrays[f"{name}.b2"] = np.zeros(out)
    if cfg.d != cfg.d_e:
        # fixed projection of edge features into mail space
        arrays["edge_proj"] = _uniform(rng, cfg.d_e, (cfg.d_e, d))
    return {name: Tensor(a, requires_grad=True, name=name) for name, a in arrays.items()}


# --- encoder pieces --------------------------------------------------------------

def positional_encode(mails: Tensor, pos: Tensor) -> Tensor:
    mails, pos = ad.as_tensor(mails), ad.as_tensor(pos)
    if mails.shape[-2:] != pos.shape:
        raise ad.ShapeError(f"positional_encode: mailbox {mails.shape} vs positions {pos.shape}")
    return ad.add(mails, pos)


def attend_head(z, mails_hat, wq, wk, wv, scale_dim: int | None = None, *,
                dropout: float = 0.0, training: bool = False, rng=None) -> tuple[Tensor, np.ndarray]:
    """Scaled dot-product attention of one query per node over its mailbox.

    Returns the ``(B, d_h)`` head output and the ``(B, m)`` softmax weights
    (before dropout). ``scale_dim`` defaults to the key width.
    """
    z, mails_hat = ad.as_tensor(z), ad.as_tensor(mails_hat)
    single = z.ndim == 1
    if single:
        z = ad.reshape(z, (1, z.shape[0]))
        mails_hat = ad.reshape(mails_hat, (1,) + mails_hat.shape)
    if mails_hat.ndim != 3 or z.shape[0] != mails_hat.shape[0] or z.shape[1] != mails_hat.shape[2]:
        raise ad.ShapeError(f"attend_head: query {z.shape} vs mailbox {mails_hat.shape}")
    b, d_h = z.shape[0], wq.shape[1]
    q = ad.reshape(ad.matmul(z, wq), (b, 1, d_h))
    k = ad.matmul(mails_hat, wk)
    v = ad.matmul(mails_hat, wv)
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(scale_dim or d_h))
    weights = ad.softmax(scores)
    attn = ad.dropout(weights, dropout, training, rng)
    out = ad.reshape(ad.matmul(attn, v), (b, d_h))
    w = weights.data.reshape(b, -1)
    if single:
        return ad.reshape(out, (d_h,)), w[0]
    return out, w


def multi_head(z, mails_hat, params: dict[str, Tensor], cfg: ModelConfig, *,
               training: bool = False, rng=None) -> tuple[Tensor, np.ndarray]:
    """Concatenate per-head outputs and project with ``wo``; weights come back as ``(B, H, m)``."""
    scale_dim = cfg.d_head if cfg.attn_scale == "head" else cfg.d
    outs, weights = [], []
    for k in range(cfg.heads):
        o, w = attend_head(z, mails_hat, params[f"wq.{k}"], params[f"wk.{k}"], params[f"wv.{k}"],
                           scale_dim, dropout=cfg.dropout, training=training, rng=rng)
        outs.append(o)
        weights.append(w)
    joined = outs[0] if len(outs) == 1 else ad.concat(outs)
    return ad.matmul(joined, params["wo"]), np.stack(weights, axis=-2)


def layer_norm_residual(attn_out, z_prev, g, b, eps: float = 1e-6) -> Tensor:
    a = ad.add(attn_out, z_prev)
    centered = ad.add(a, ad.neg(ad.mean(a)))
    normed = ad.mul(centered, ad.reciprocal(ad.sqrt(ad.add(ad.var(a), eps))))
    return ad.add(ad.mul(normed, g), b)


def mlp(x, w1, b1, w2, b2, p: float = 0.0, training: bool = False, rng=None) -> Tensor:
    hidden = ad.relu(ad.add(ad.matmul(x, w1), b1))
    hidden = ad.dropout(hidden, p, training, rng)
    return ad.add(ad.matmul(hidden, w2), b2)


def encode(z_prev, mails, params: dict[str, Tensor], cfg: ModelConfig, *,
           training: bool = False, rng=None) -> tuple[Tensor, np.ndarray]:
    """``z(t)`` for a block of nodes from their previous embeddings and sorted mailboxes."""
    z_prev, mails = ad.as_tensor(z_prev), ad.as_tensor(mails)
    mails_hat = positional_encode(mails, params["pos"])
    attn, weights = multi_head(z_prev, mails_hat, params, cfg, training=training, rng=rng)
    normed = layer_norm_residual(attn, z_prev, params["ln.g"], params["ln.b"], cfg.ln_eps)
    z = mlp(normed, params["enc.w1"], params["enc.b1"], params["enc.w2"], params["enc.b2"],
            cfg.dropout, training, rng)
    return z, weights


# --- decoders --------------------------------------------------------------------

def _head(name: str, x: Tensor, params, cfg: ModelConfig, training: bool, rng) -> Tensor:
    expected = params[f"{name}.w1"].shape[0]
    if x.shape[-1] != expected:
        raise ad.ShapeError(f"decode_{name}: input width {x.shape[-1]} != {expected}")
    out = mlp(x, params[f"{name}.w1"], params[f"{name}.b1"], params[f"{name}.w2"],
              params[f"{name}.b2"], cfg.dropout, training, rng)
    return ad.reshape(out, out.shape[:-1])


def decode_link(z_i, z_j, params, cfg: ModelConfig, *, training=False, rng=None) -> Tensor:
    return _head("link", ad.concat([z_i, z_j]), params, cfg, training, rng)


def decode_edge(z_i, e_ij, z_j, params, cfg: ModelConfig, *, training=False, rng=None) -> Tensor:
    return _head("edge", ad.concat([z_i, e_ij, z_j]), params, cfg, training, rng)


def decode_node(z_i, params, cfg: ModelConfig, *, training=False, rng=None) -> Tensor:
    return _head("node", ad.as_tensor(z_i), params, cfg, training, rng)


def decode_dot(z_i, z_j) -> Tensor:
    """Inner-product score, the literal alternative to the link MLP."""
    prod = ad.mul(z_i, z_j)
    ones = Tensor(np.ones((prod.shape[-1], 1)))
    out = ad.matmul(prod, ones)
    return ad.reshape(out, out.shape[:-1])


# --- model container ---------------------------------------------------------------

ENCODER_PREFIXES = ("pos", "wq.", "wk.", "wv.", "wo", "ln.", "enc.")


class APAN:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)

    def parameters(self, task: str = "link", loss: str = "mlp") -> list[Tensor]:
        """Trainable tensors for a task; the fixed edge projection is never included."""
        names = [n for n in self.params if n.startswith(ENCODER_PREFIXES)]
        if task == "link" and loss == "mlp":
            names += [n for n in self.params if n.startswith("link.")]
        elif task in ("edge", "node"):
            names = [n for n in self.params if n.startswith(task + ".")]
        return [self.params[n] for n in names]

    def encode(self, z_prev, mails, *, training=False, rng=None):
        return encode(z_prev, mails, self.params, self.cfg, training=training, rng=rng)

    def decode_link(self, z_i, z_j, *, training=False, rng=None):
        return decode_link(z_i, z_j, self.params, self.cfg, training=training, rng=rng)

    def decode_edge(self, z_i, e_ij, z_j, *, training=False, rng=None):
        return decode_edge(z_i, e_ij, z_j, self.params, self.cfg, training=training, rng=rng)

    def decode_node(self, z_i, *, training=False, rng=None):
        return decode_node(z_i, self.params, self.cfg, training=training, rng=rng)

    def project_edges(self, feats: np.ndarray) -> np.ndarray:
        if "edge_proj" in self.params:
            return np.asarray(feats) @ self.params["edge_proj"].data
        return np.asarray(feats, dtype=np.float64)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, arr in state.items():
            if self.params[name].shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {self.params[name].shape}")
            self.params[name].data[...] = arr

    def save(self, path: str | Path) -> None:
        save_checkpoint(self, path)


class NodeStateStore:
    """Last embedding ``z(t-)`` and last update time per node, zero-initialised."""

    def __init__(self, num_nodes: int, d: int):
        self.z = np.zeros((num_nodes, d))
        self.last_update = np.zeros(num_nodes)

    def get(self, nodes) -> np.ndarray:
        return self.z[np.asarray(nodes, dtype=np.int64)]

    def update(self, nodes, z: np.ndarray, t) -> None:
        nodes = np.asarray(nodes, dtype=np.int64)
        self.z[nodes] = z
        self.last_update[nodes] = t


# --- checkpoint io ---------------------------------------------------------------------
# layout: MAGIC, <5q (d, d_e, m, heads, hidden), then repeated
# <q name_len, name bytes, <q rank, <rank q dims, f64 LE payload

def save_checkpoint(model: APAN, path: str | Path) -> None:
    cfg = model.cfg
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<5q", cfg.d, cfg.d_e, cfg.m, cfg.heads, cfg.hidden))
        for name, tensor in model.params.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<q", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<q", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}q", *tensor.shape))
            fh.write(tensor.data.astype("<f8").tobytes())


def load_checkpoint(path: str | Path, **overrides) -> APAN:
    """Read a checkpoint; ``overrides`` set config fields not stored in the file."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path}: not an APAN checkpoint")
        d, d_e, m, heads, hidden = struct.unpack("<5q", fh.read(40))
        params: dict[str, Tensor] = {}
        while True:
            head = fh.read(8)
            if not head:
                break
            (n,) = struct.unpack("<q", head)
            name = fh.read(n).decode("utf-8")
            (rank,) = struct.unpack("<q", fh.read(8))
            shape = struct.unpack(f"<{rank}q", fh.read(8 * rank))
            count = int(np.prod(shape)) if rank else 1
            data = np.frombuffer(fh.read(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
            params[name] = Tensor(data, requires_grad=True, name=name)
    cfg = ModelConfig(d=d, d_e=d_e, m=m, heads=heads, hidden=hidden, **overrides)
    return APAN(cfg, params)
