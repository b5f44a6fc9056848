"""A small rotation-invariant message-passing potential with multi-channel heads.

Per-atom features ``h`` start from an element embedding and are refined by
``L`` residual message-passing rounds::

    m_i = sum_j h_j * (rbf(r_ij) @ Wf + bf) * fcut(r_ij)
    h_i <- h_i + silu(m_i @ U + c)

Energy head (per atom, summed per structure)::

    E^(d) = sum_i [silu(h_i @ We1 + be1) @ We2 + be2]_d

Direct force head, symmetric in (i, j) so that pair contributions cancel::

    p_ij = [h_i + h_j, h_i * h_j, rbf(r_ij)]
    w_ij = silu(p_ij @ Wp1 + bp1) @ Wp2 + bp2
    F_i^(d) = sum_j w_ij^(d) * fcut(r_ij) * u_ij

All gradients with respect to parameters are written out by hand in
:func:`backward`.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .core import MAX_Z, AtomicSystem, InputError, build_neighbor_list

CHECKPOINT_MAGIC = b"LAMMCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    hidden: int = 64
    layers: int = 2
    num_rbf: int = 16
    cutoff: float = 5.0
    num_heads: int = 1

    def __post_init__(self):
        if min(self.hidden, self.layers, self.num_rbf, self.num_heads) < 1 or not self.cutoff > 0:
            raise InputError(f"invalid model config {self}")

    def with_heads(self, num_heads: int) -> ModelConfig:
        return ModelConfig(self.hidden, self.layers, self.num_rbf, self.cutoff, num_heads)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Parameter names and shapes in declaration (serialization) order."""
    H, K, D = cfg.hidden, cfg.num_rbf, cfg.num_heads
    shapes = {"embedding": (MAX_Z + 1, H)}
    for l in range(cfg.layers):
        shapes[f"filter_w{l}"] = (K, H)
        shapes[f"filter_b{l}"] = (H,)
        shapes[f"update_w{l}"] = (H, H)
        shapes[f"update_b{l}"] = (H,)
    shapes.update(
        energy_w1=(H, H),
        energy_b1=(H,),
        energy_w2=(H, D),
        energy_b2=(D,),
        force_w1=(2 * H + K, H),
        force_b1=(H,),
        force_w2=(H, D),
        force_b2=(D,),
    )
    return shapes


def is_head_param(name: str) -> bool:
    return name.startswith("energy_") or name.startswith("force_")


ModelParams = dict  # name -> np.ndarray, in param_shapes order


def _init_tensor(rng, name: str, shape, cfg: ModelConfig) -> np.ndarray:
    if len(shape) == 1:
        return np.zeros(shape)
    if name == "embedding":
        scale = 1.0
    elif name.startswith("filter_w"):
        # messages sum over ~10 neighbours
        scale = 1.0 / np.sqrt(shape[0] * 10.0)
    else:
        scale = np.sqrt(3.0 / shape[0])
    return rng.uniform(-scale, scale, size=shape)


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Scaled-uniform initialisation. Encoder and heads use separate RNG streams,
    so the encoder does not depend on the number of heads."""
    enc_rng = np.random.default_rng([seed, 0])
    head_rng = np.random.default_rng([seed, 1])
    params = {}
    for name, shape in param_shapes(cfg).items():
        rng = head_rng if is_head_param(name) else enc_rng
        params[name] = _init_tensor(rng, name, shape, cfg)
    return params


def reset_heads(params: ModelParams, cfg: ModelConfig, num_heads: int, seed: int = 0):
    """Fresh heads with ``num_heads`` channels; encoder arrays are copied unchanged."""
    new_cfg = cfg.with_heads(num_heads)
    rng = np.random.default_rng([seed, 2])
    out = {}
    for name, shape in param_shapes(new_cfg).items():
        if is_head_param(name):
            out[name] = _init_tensor(rng, name, shape, new_cfg)
        else:
            out[name] = params[name].copy()
    return out, new_cfg


def check_params(params: ModelParams, cfg: ModelConfig) -> None:
    shapes = param_shapes(cfg)
    if list(params) != list(shapes):
        raise InputError("parameter names do not match the config")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise InputError(f"{name}: shape {params[name].shape}, expected {shape}")
        if not np.all(np.isfinite(params[name])):
            raise InputError(f"{name}: non-finite values")


# ---------------------------------------------------------------------------
# radial features


def rbf_expand(r: np.ndarray, num_rbf: int, cutoff: float) -> np.ndarray:
    """Gaussians with centres uniform on [0, cutoff] and width equal to the spacing."""
    centers = np.linspace(0.0, cutoff, num_rbf)
    width = cutoff / max(num_rbf - 1, 1)
    return np.exp(-0.5 * ((r[:, None] - centers[None, :]) / width) ** 2)


def cosine_cutoff(r: np.ndarray, cutoff: float) -> np.ndarray:
    return np.where(r < cutoff, 0.5 * (np.cos(np.pi * r / cutoff) + 1.0), 0.0)


def silu(x):
    return x * expit(x)


def silu_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


# ---------------------------------------------------------------------------
# batched graph


class Graph:
    """Several structures merged into one disconnected graph."""

    def __init__(self, systems, cfg: ModelConfig):
        systems = list(systems)
        if not systems:
            raise InputError("empty batch")
        natoms = np.array([s.natoms for s in systems])
        offsets = np.concatenate([[0], np.cumsum(natoms)[:-1]])
        dst, src, dist, unit = [], [], [], []
        for s, off in zip(systems, offsets):
            nl = build_neighbor_list(s, cfg.cutoff)
            dst.append(nl.i + off)
            src.append(nl.j + off)
            dist.append(nl.distance)
            unit.append(nl.unit)
        self.num_graphs = len(systems)
        self.natoms = natoms
        self.num_atoms = int(natoms.sum())
        self.numbers = np.concatenate([s.numbers for s in systems])
        if self.numbers.min() < 1 or self.numbers.max() > MAX_Z:
            raise InputError("atomic number outside the embedding table")
        self.batch = np.repeat(np.arange(len(systems)), natoms)
        self.dst = np.concatenate(dst).astype(np.int64)
        self.src = np.concatenate(src).astype(np.int64)
        self.dist = np.concatenate(dist)
        self.unit = np.concatenate(unit).reshape(-1, 3)
        self.rbf = rbf_expand(self.dist, cfg.num_rbf, cfg.cutoff)
        self.fcut = cosine_cutoff(self.dist, cfg.cutoff)
        n, e = self.num_atoms, len(self.dst)
        ones = np.ones(e)
        # scatter matrices: (atoms x edges)
        self.to_dst = sp.csr_matrix((ones, (self.dst, np.arange(e))), shape=(n, e))
        self.to_src = sp.csr_matrix((ones, (self.src, np.arange(e))), shape=(n, e))
        self.to_graph = sp.csr_matrix(
            (np.ones(n), (self.batch, np.arange(n))), shape=(self.num_graphs, n)
        )

    @property
    def num_edges(self) -> int:
        return len(self.dst)


# ---------------------------------------------------------------------------
# forward / backward


def forward(graph: Graph, params: ModelParams, cfg: ModelConfig):
    """Returns (energies (B, D), forces (N, 3, D), cache for backward)."""
    g = graph
    h = params["embedding"][g.numbers]
    cache = {"h": [h]}
    for l in range(cfg.layers):
        filt = g.rbf @ params[f"filter_w{l}"] + params[f"filter_b{l}"]
        msg = h[g.src] * filt * g.fcut[:, None]
        m = g.to_dst @ msg
        a = m @ params[f"update_w{l}"] + params[f"update_b{l}"]
        h = h + silu(a)
        cache["h"].append(h)
        cache[f"filt{l}"], cache[f"m{l}"], cache[f"a{l}"] = filt, m, a

    pre_e = h @ params["energy_w1"] + params["energy_b1"]
    z = silu(pre_e)
    e_atom = z @ params["energy_w2"] + params["energy_b2"]
    energy = g.to_graph @ e_atom

    hi, hj = h[g.dst], h[g.src]
    pair = np.concatenate([hi + hj, hi * hj, g.rbf], axis=1)
    pre_p = pair @ params["force_w1"] + params["force_b1"]
    q = silu(pre_p)
    w = q @ params["force_w2"] + params["force_b2"]
    coef = w * g.fcut[:, None]  # (E, D)
    edge_f = g.unit[:, :, None] * coef[:, None, :]  # (E, 3, D)
    D = coef.shape[1]
    forces = (g.to_dst @ edge_f.reshape(len(coef), 3 * D)).reshape(g.num_atoms, 3, D)

    cache.update(pre_e=pre_e, z=z, pair=pair, pre_p=pre_p, q=q, hi=hi, hj=hj)
    return energy, forces, cache


def backward(graph: Graph, params: ModelParams, cfg: ModelConfig, cache, d_energy, d_forces):
    """Reverse-mode parameter gradients given dL/dE (B, D) and dL/dF (N, 3, D)."""
    g = graph
    H = cfg.hidden
    grads = {}
    h = cache["h"][-1]

    # energy head
    d_e_atom = g.to_graph.T @ d_energy
    grads["energy_w2"] = cache["z"].T @ d_e_atom
    grads["energy_b2"] = d_e_atom.sum(axis=0)
    d_pre_e = (d_e_atom @ params["energy_w2"].T) * silu_grad(cache["pre_e"])
    grads["energy_w1"] = h.T @ d_pre_e
    grads["energy_b1"] = d_pre_e.sum(axis=0)
    dh = d_pre_e @ params["energy_w1"].T

    # force head
    d_edge = d_forces[g.dst]  # (E, 3, D)
    d_w = np.einsum("ec,ecd->ed", g.unit, d_edge) * g.fcut[:, None]
    grads["force_w2"] = cache["q"].T @ d_w
    grads["force_b2"] = d_w.sum(axis=0)
    d_pre_p = (d_w @ params["force_w2"].T) * silu_grad(cache["pre_p"])
    grads["force_w1"] = cache["pair"].T @ d_pre_p
    grads["force_b1"] = d_pre_p.sum(axis=0)
    d_pair = d_pre_p @ params["force_w1"].T
    d_sum, d_prod = d_pair[:, :H], d_pair[:, H : 2 * H]
    dh = dh + g.to_dst @ (d_sum + d_prod * cache["hj"]) + g.to_src @ (d_sum + d_prod * cache["hi"])

    # message-passing layers, last to first
    for l in reversed(range(cfg.layers)):
        h_in = cache["h"][l]
        d_a = dh * silu_grad(cache[f"a{l}"])
        grads[f"update_w{l}"] = cache[f"m{l}"].T @ d_a
        grads[f"update_b{l}"] = d_a.sum(axis=0)
        d_msg = (d_a @ params[f"update_w{l}"].T)[g.dst]
        filt = cache[f"filt{l}"]
        d_filt = d_msg * h_in[g.src] * g.fcut[:, None]
        grads[f"filter_w{l}"] = g.rbf.T @ d_filt
        grads[f"filter_b{l}"] = d_filt.sum(axis=0)
        dh = dh + g.to_src @ (d_msg * filt * g.fcut[:, None])

    d_emb = np.zeros_like(params["embedding"])
    np.add.at(d_emb, g.numbers, dh)
    grads["embedding"] = d_emb
    return {name: grads[name] for name in params}


# ---------------------------------------------------------------------------
# single-structure conveniences


def encode(system: AtomicSystem, params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    """Per-atom invariant features (N, H)."""
    graph = Graph([system], cfg)
    h = params["embedding"][graph.numbers]
    for l in range(cfg.layers):
        filt = graph.rbf @ params[f"filter_w{l}"] + params[f"filter_b{l}"]
        m = graph.to_dst @ (h[graph.src] * filt * graph.fcut[:, None])
        h = h + silu(m @ params[f"update_w{l}"] + params[f"update_b{l}"])
    return h


def atom_energies(features: np.ndarray, params: ModelParams) -> np.ndarray:
    z = silu(features @ params["energy_w1"] + params["energy_b1"])
    return z @ params["energy_w2"] + params["energy_b2"]


def predict_energy(features: np.ndarray, params: ModelParams) -> np.ndarray:
    return atom_energies(features, params).sum(axis=0)


def predict_forces(system: AtomicSystem, features: np.ndarray, params: ModelParams, cfg: ModelConfig):
    """Forces (N, 3, D) from the pair head, given features of the same system."""
    nl = build_neighbor_list(system, cfg.cutoff)
    rbf = rbf_expand(nl.distance, cfg.num_rbf, cfg.cutoff)
    fcut = cosine_cutoff(nl.distance, cfg.cutoff)
    hi, hj = features[nl.i], features[nl.j]
    pair = np.concatenate([hi + hj, hi * hj, rbf], axis=1)
    w = silu(pair @ params["force_w1"] + params["force_b1"]) @ params["force_w2"] + params["force_b2"]
    edge_f = nl.unit[:, :, None] * (w * fcut[:, None])[:, None, :]
    out = np.zeros((system.natoms, 3, w.shape[1]))
    np.add.at(out, nl.i, edge_f)
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: ModelParams, cfg: ModelConfig, metadata: dict | None = None) -> Path:
    """Binary parameter file plus a ``.json`` sidecar with training metadata."""
    check_params(params, cfg)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<IIIId", cfg.hidden, cfg.layers, cfg.num_rbf, cfg.num_heads, cfg.cutoff))
        for name in param_shapes(cfg):
            fh.write(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    sidecar = {"model_config": asdict(cfg), "metadata": metadata or {}}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict]:
    path = Path(path)
    data = path.read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise InputError(f"{path}: not a checkpoint")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != CHECKPOINT_VERSION:
        raise InputError(f"{path}: unsupported checkpoint version {version}")
    hidden, layers, num_rbf, heads, cutoff = struct.unpack_from("<IIIId", data, 12)
    cfg = ModelConfig(hidden, layers, num_rbf, cutoff, heads)
    off = 12 + struct.calcsize("<IIIId")
    params = {}
    for name, shape in param_shapes(cfg).items():
        count = int(np.prod(shape))
        params[name] = np.frombuffer(data, "<f8", count, off).reshape(shape).copy()
        off += 8 * count
    if off != len(data):
        raise InputError(f"{path}: trailing bytes")
    meta = {}
    sidecar = Path(str(path) + ".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text()).get("metadata", {})
    return params, cfg, meta
