"""
Prototype bank, Sinkhorn code assignment and the swapped prediction loss.
"""

from dataclasses import dataclass
from typing import Mapping, Tuple

import numpy as np
from scipy.special import logsumexp
from scipy.special import softmax as _softmax

from csst.core.errors import ConfigError, NumericError
from csst.numerics import autodiff as ad
from csst.numerics.autodiff import Var
from csst.numerics.params import ParamStore, init_affine

PROJECTION_PREFIX = "proj/"
PROTOTYPES = "protos/C"


@dataclass(frozen=True)
class PrototypeBank:
    """Shape of the prototypes network: projection d -> d_c and K unit-norm rows."""

    n_prototypes: int
    prototype_dim: int
    temperature: float
    projection_layers: int = 1

    def __post_init__(self):
        if self.n_prototypes < 2:
            raise ConfigError(f"need at least 2 prototypes, got {self.n_prototypes}")
        if self.prototype_dim <= 0 or self.temperature <= 0:
            raise ConfigError("prototype_dim and temperature must be positive")

    def init(self, hidden_dim: int, rng: np.random.Generator) -> ParamStore:
        tensors = {}
        for i in range(self.projection_layers):
            fan_in = hidden_dim if i == 0 else self.prototype_dim
            tensors[f"proj/layer{i}/W"], tensors[f"proj/layer{i}/b"] = init_affine(rng, fan_in, self.prototype_dim)
        tensors[PROTOTYPES] = _unit_rows(rng.standard_normal((self.n_prototypes, self.prototype_dim)))
        return ParamStore(tensors)


def _unit_rows(matrix: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    return matrix / np.maximum(norms, 1e-12)


def renormalize(params: ParamStore) -> ParamStore:
    """Project every prototype row back onto the unit sphere."""
    return params.replace(PROTOTYPES, _unit_rows(params[PROTOTYPES]))


def project(o: Var, leaves: Mapping[str, Var]) -> Var:
    """z = normalize(g(o)); ReLU between projection layers, none after the last."""
    depth = sum(1 for name in leaves if name.startswith(PROJECTION_PREFIX) and name.endswith("/W"))
    h = o
    for i in range(depth):
        h = ad.add(ad.matmul(h, leaves[f"proj/layer{i}/W"]), leaves[f"proj/layer{i}/b"])
        if i < depth - 1:
            h = ad.relu(h)
    return ad.l2_normalize(h)


def prototype_scores(z: Var, leaves: Mapping[str, Var]) -> Var:
    """z · c_k for every prototype (B x K)."""
    return ad.matmul(z, ad.transpose(leaves[PROTOTYPES]))


def prototype_probs(scores: np.ndarray, temperature: float) -> np.ndarray:
    """Temperature softmax over prototypes, row-wise."""
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    return _softmax(np.asarray(scores, dtype=np.float64) / temperature, axis=-1)


def sinkhorn_codes(scores: np.ndarray, n_iters: int, temperature: float = 1.0) -> np.ndarray:
    """Equal-partition soft assignments for a batch.

    Starts from exp(scores / τ) and alternates column scaling (to B/K) and row
    scaling (to 1) `n_iters` times, then normalizes rows once more. The scaling
    runs on logs, so a column far below the batch maximum never underflows to
    zero. Returns a plain array, so nothing downstream differentiates through it.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] < 1 or scores.shape[1] < 2:
        raise ConfigError(f"scores must be B x K with B >= 1, K >= 2; got {scores.shape}")
    if not np.all(np.isfinite(scores)):
        raise NumericError("non-finite prototype scores")
    if n_iters < 0:
        raise ConfigError(f"n_iters must be >= 0, got {n_iters}")
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    b, k = scores.shape
    log_q = scores / temperature
    log_col = np.log(b / k)
    for _ in range(n_iters):
        log_q = log_q + (log_col - logsumexp(log_q, axis=0, keepdims=True))
        log_q = log_q - logsumexp(log_q, axis=1, keepdims=True)
    q = np.exp(log_q - logsumexp(log_q, axis=1, keepdims=True))
    if not np.all(np.isfinite(q)):
        raise NumericError("non-finite Sinkhorn codes", detail={"temperature": temperature})
    return q


def swapped_terms(scores_anchor: Var, scores_positive: Var, codes_anchor: np.ndarray,
                  codes_positive: np.ndarray, temperature: float) -> Var:
    """CE(q_pos, p_anchor) + CE(q_anchor, p_pos), each averaged over rows."""
    logp_anchor = ad.log_softmax(ad.scale(scores_anchor, 1.0 / temperature))
    logp_positive = ad.log_softmax(ad.scale(scores_positive, 1.0 / temperature))
    return ad.add(ad.cross_entropy(codes_positive, logp_anchor), ad.cross_entropy(codes_anchor, logp_positive))


def swapped_loss(z_anchor: Var, z_positive: Var, leaves: Mapping[str, Var], temperature: float,
                 n_iters: int) -> Tuple[Var, np.ndarray, np.ndarray]:
    """Swapped prediction loss for row-aligned anchor/positive embeddings.

    Codes are computed per view over its own batch. Returns the loss with the
    two code matrices.
    """
    s_anchor = prototype_scores(z_anchor, leaves)
    s_positive = prototype_scores(z_positive, leaves)
    q_anchor = sinkhorn_codes(s_anchor.value, n_iters, temperature)
    q_positive = sinkhorn_codes(s_positive.value, n_iters, temperature)
    loss = swapped_terms(s_anchor, s_positive, q_anchor, q_positive, temperature)
    return loss, q_anchor, q_positive
