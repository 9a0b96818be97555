"""
Backbone networks and regression head.

Every network is a stack of affine layers with ReLU on each layer, recorded on
a Tape so the same code serves forward evaluation and backpropagation.
Parameters are named "<group>/<stack>/layer<i>/{W,b}" inside one ParamStore.
"""

import re
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from csst.core.errors import ConfigError, ShapeError
from csst.numerics import autodiff as ad
from csst.numerics.autodiff import Tape, Var
from csst.numerics.params import ParamStore, init_affine
from csst.schemas.config import BackboneConfig, BackboneVariant
from csst.services.graph import Batch, edge_weight

Leaves = Mapping[str, Var]

BACKBONE_PREFIXES = ("f_a/", "f_c/", "f_e/", "f_g/", "f_m/", "f_n/", "f_s/")
HEAD_PREFIX = "f_o/"

VARIANT_GROUPS: Dict[BackboneVariant, Tuple[str, ...]] = {
    BackboneVariant.MLP: ("f_m",),
    BackboneVariant.MSFNET: ("f_a", "f_c", "f_n", "f_s"),
    BackboneVariant.STGNN: ("f_a", "f_c", "f_e", "f_g", "f_n", "f_s"),
}

_LAYER = re.compile(r"/layer(\d+)/W$")


def _stack_shapes(prefix: str, fan_in: int, width: int, depth: int) -> Dict[str, Tuple[int, int]]:
    shapes = {}
    for i in range(depth):
        shapes[f"{prefix}/layer{i}"] = (fan_in if i == 0 else width, width)
    return shapes


def backbone_layout(cfg: BackboneConfig, dims: Tuple[int, int, int]) -> Dict[str, Tuple[int, int]]:
    """Affine layer name -> (fan_in, fan_out) for the configured variant."""
    d_a, d_c, d_r = dims
    d, depth = cfg.hidden_dim, cfg.mlp_depth
    layout: Dict[str, Tuple[int, int]] = {}
    if cfg.variant == BackboneVariant.MLP:
        layout.update(_stack_shapes("f_m/stack", d_a + d_c + d_r, d, depth))
        return layout
    layout.update(_stack_shapes("f_a/stack", d_a, d, depth))
    layout.update(_stack_shapes("f_c/stack", d_c, d, depth))
    layout.update(_stack_shapes("f_n/stack", d_r, d, depth))
    layout.update(_stack_shapes("f_s/fuse", 2 * d, d, depth))
    if cfg.variant == BackboneVariant.MSFNET:
        layout.update(_stack_shapes("f_s/node_proj", 2 * d, d, depth))
        return layout
    if cfg.variant != BackboneVariant.STGNN:
        raise ConfigError(f"unknown backbone variant: {cfg.variant}")
    layout.update(_stack_shapes("f_e/stack", 1, d, depth))
    for r in range(cfg.conv_layers):
        node_width = 2 * d if r == 0 else d
        layout.update(_stack_shapes(f"f_g/round{r}", 2 * node_width + d, d, depth))
    return layout


def _init_layout(layout: Dict[str, Tuple[int, int]], rng: np.random.Generator) -> ParamStore:
    tensors = {}
    for name in sorted(layout):
        fan_in, fan_out = layout[name]
        tensors[f"{name}/W"], tensors[f"{name}/b"] = init_affine(rng, fan_in, fan_out)
    return ParamStore(tensors)


def init_backbone(cfg: BackboneConfig, dims: Tuple[int, int, int], rng: np.random.Generator) -> ParamStore:
    return _init_layout(backbone_layout(cfg, dims), rng)


def init_head(hidden_dim: int, rng: np.random.Generator) -> ParamStore:
    """f_o: affine d -> 1 producing the logit."""
    weight, bias = init_affine(rng, hidden_dim, 1)
    return ParamStore({"f_o/W": weight, "f_o/b": bias})


def check_backbone(params: Mapping[str, np.ndarray], cfg: BackboneConfig, dims: Tuple[int, int, int]) -> None:
    """Raise ShapeError unless `params` holds exactly the variant's backbone tensors."""
    expected = {}
    for name, (fan_in, fan_out) in backbone_layout(cfg, dims).items():
        expected[f"{name}/W"] = (fan_in, fan_out)
        expected[f"{name}/b"] = (fan_out,)
    present = {k: tuple(np.shape(v)) for k, v in params.items() if k.startswith(BACKBONE_PREFIXES)}
    if present != expected:
        diff = sorted(set(present.items()) ^ set(expected.items()))
        raise ShapeError(f"backbone parameters do not match the {cfg.variant.value} layout",
                         detail={"mismatch": [f"{k}{s}" for k, s in diff[:6]]})


# ---------------------------------------------------------------------------
# forward building blocks

def affine(x: Var, leaves: Leaves, name: str) -> Var:
    return ad.add(ad.matmul(x, leaves[f"{name}/W"]), leaves[f"{name}/b"])


def mlp(x: Var, leaves: Leaves, prefix: str) -> Var:
    """Affine + ReLU for every layer registered under `prefix`."""
    depth = sum(1 for name in leaves if name.startswith(prefix + "/") and _LAYER.search(name))
    if depth == 0:
        raise ShapeError(f"no layers under {prefix}")
    h = x
    for i in range(depth):
        h = ad.relu(affine(h, leaves, f"{prefix}/layer{i}"))
    return h


def _check_width(x: Var, leaves: Leaves, prefix: str, what: str) -> None:
    fan_in = leaves[f"{prefix}/layer0/W"].shape[0]
    if x.shape[-1] != fan_in:
        raise ShapeError(f"{what}: input length {x.shape[-1]}, network expects {fan_in}")


def encode_node(v_a: Var, v_c: Var, leaves: Leaves) -> Var:
    """p0 = f_a(v_a) ⊕ f_c(v_c), one row per node."""
    _check_width(v_a, leaves, "f_a/stack", "encode_node v_a")
    _check_width(v_c, leaves, "f_c/stack", "encode_node v_c")
    return ad.concat([mlp(v_a, leaves, "f_a/stack"), mlp(v_c, leaves, "f_c/stack")], axis=-1)


def encode_edge(tape: Tape, d_ij: np.ndarray, sigma: float, leaves: Leaves) -> Var:
    """e_ij = f_e(exp(-d^2 / sigma^2)); `d_ij` is a vector of meters."""
    w = np.atleast_1d(edge_weight(np.asarray(d_ij, dtype=np.float64), sigma)).reshape(-1, 1)
    return mlp(tape.constant(w), leaves, "f_e/stack")


def mpnn_aggregate(p0: Var, e: Var, edge_dst: np.ndarray, edge_src: np.ndarray, n_nodes: int,
                   leaves: Leaves, rounds: int) -> Var:
    """Node states after `rounds` of summed messages f_g(h_dst, h_src, e)."""
    if e.shape[0] != len(edge_dst) or len(edge_src) != len(edge_dst):
        raise ShapeError(f"edge embeddings ({e.shape[0]}) do not match the edge list ({len(edge_dst)})")
    if len(edge_dst) and (edge_dst.max() >= n_nodes or edge_src.max() >= n_nodes):
        raise ShapeError("edge endpoint has no node embedding")
    h = p0
    for r in range(rounds):
        message_in = ad.concat([ad.gather_rows(h, edge_dst), ad.gather_rows(h, edge_src), e], axis=-1)
        messages = mlp(message_in, leaves, f"f_g/round{r}")
        h = ad.segment_sum(messages, edge_dst, n_nodes)
    return h


def encode_reports(x: Var, leaves: Leaves) -> Var:
    _check_width(x, leaves, "f_n/stack", "encode_reports")
    return mlp(x, leaves, "f_n/stack")


def fuse(o_n: Var, o_g: Var, leaves: Leaves) -> Var:
    """o_t = f_s(o_n ⊕ o_g)."""
    if o_n.shape != o_g.shape:
        raise ShapeError(f"fuse: {o_n.shape} vs {o_g.shape}")
    return mlp(ad.concat([o_n, o_g], axis=-1), leaves, "f_s/fuse")


def backbone_forward(tape: Tape, batch: Batch, leaves: Leaves, cfg: BackboneConfig) -> Var:
    """Fused representation o_t, one row per batch target."""
    reports = tape.constant(batch.reports)
    if cfg.variant == BackboneVariant.MLP:
        x = ad.concat([tape.constant(batch.target_va), tape.constant(batch.target_vc), reports], axis=-1)
        _check_width(x, leaves, "f_m/stack", "mlp backbone")
        return mlp(x, leaves, "f_m/stack")

    if cfg.variant == BackboneVariant.MSFNET:
        p0 = encode_node(tape.constant(batch.target_va), tape.constant(batch.target_vc), leaves)
        o_g = mlp(p0, leaves, "f_s/node_proj")
        return fuse(encode_reports(reports, leaves), o_g, leaves)

    if cfg.variant == BackboneVariant.STGNN:
        p0 = encode_node(tape.constant(batch.node_va), tape.constant(batch.node_vc), leaves)
        e = encode_edge(tape, batch.edge_dist, cfg.sigma_m, leaves)
        h = mpnn_aggregate(p0, e, batch.edge_dst, batch.edge_src, batch.n_nodes, leaves, cfg.conv_layers)
        o_g = ad.gather_rows(h, batch.target_rows)
        return fuse(encode_reports(reports, leaves), o_g, leaves)

    raise ConfigError(f"unknown backbone variant: {cfg.variant}")


def head_logits(o_t: Var, leaves: Leaves) -> Var:
    return affine(o_t, leaves, "f_o")


def regress(o_t: Var, leaves: Leaves) -> Var:
    """ŷ_norm = sigmoid(f_o(o_t)), strictly inside (0, 1) for finite inputs."""
    return ad.sigmoid(head_logits(o_t, leaves))


def embed(batch: Batch, params: ParamStore, cfg: BackboneConfig) -> np.ndarray:
    """Forward-only o_t for a batch (no gradients kept)."""
    tape = Tape()
    return backbone_forward(tape, batch, tape.watch(params), cfg).value


def predict_normalized(batch: Batch, params: ParamStore, cfg: BackboneConfig,
                       head: Optional[ParamStore] = None) -> np.ndarray:
    tape = Tape()
    leaves = tape.watch(params if head is None else params.merged(head))
    return regress(backbone_forward(tape, batch, leaves, cfg), leaves).value.reshape(-1)
