"""
Gradient diagnostics on small random problems.
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional

import numpy as np

from csst.core.errors import NumericError
from csst.models.contrastive import PrototypeBank, prototype_scores, project, sinkhorn_codes, swapped_terms
from csst.models.encoders import backbone_forward, head_logits, init_backbone, init_head
from csst.numerics import autodiff as ad
from csst.numerics.autodiff import Tape
from csst.numerics.gradcheck import GradCheckResult, LossFn, gradcheck
from csst.numerics.params import ParamStore, derive_rng
from csst.schemas.config import BackboneConfig, BackboneVariant, GraphConfig
from csst.schemas.dataset import Dataset, Poi
from csst.services.context import PipelineContext
from csst.utils.logger import get_logger

logger = get_logger(__name__)

TOY_DIMS = (3, 6, 4)


def toy_dataset(rng: np.random.Generator, n_pois: int = 10, extent_m: float = 400.0) -> Dataset:
    """Random POIs packed into a few hundred meters so most pairs are neighbors."""
    degrees = extent_m / 111_000.0
    pois = []
    for i in range(n_pois):
        ages = rng.dirichlet(np.ones(4))
        genders = rng.dirichlet(np.ones(2))
        pois.append(Poi(
            id=f"t{i:03d}",
            lon=116.4 + rng.uniform(0, degrees),
            lat=39.9 + rng.uniform(0, degrees),
            v_a=np.array([rng.uniform(50, 5000), float(rng.integers(0, 4)), rng.uniform(-1, 1)]),
            v_c=np.concatenate([ages, genders]),
            reports=rng.uniform(0, 30, size=TOY_DIMS[2]),
            label=float(rng.uniform(10, 300)),
        ))
    return Dataset(pois=tuple(pois), window=tuple(range(TOY_DIMS[2])))


def toy_backbone(variant: BackboneVariant, conv_layers: int = 1, hops: int = 1) -> BackboneConfig:
    return BackboneConfig(variant=variant, hidden_dim=32, mlp_depth=2, conv_layers=conv_layers,
                          sigma_m=300.0, hops=hops, max_neighbors=4)


def toy_context(seed: int, variant: BackboneVariant, n_pois: int = 10, conv_layers: int = 1,
                hops: int = 1) -> PipelineContext:
    dataset = toy_dataset(derive_rng(seed, "toy-data"), n_pois)
    return PipelineContext.build(dataset, GraphConfig(k=4, cutoff_m=1000.0),
                                 toy_backbone(variant, conv_layers, hops))


def regression_loss(context: PipelineContext, ids: List[str], targets: np.ndarray) -> LossFn:
    batch = context.batch(ids)

    def fn(tape, leaves):
        o_t = backbone_forward(tape, batch, leaves, context.backbone)
        return ad.mean(ad.bce_with_logits(head_logits(o_t, leaves), targets.reshape(-1, 1)))

    return fn


def contrastive_loss(context: PipelineContext, anchors: List[str], positives: List[str],
                     params: ParamStore, temperature: float, n_iters: int) -> LossFn:
    """Swapped loss with codes frozen at `params` (they are constants for the gradient)."""
    batch_a, batch_p = context.batch(anchors), context.batch(positives)

    def scores(tape, leaves):
        z_a = project(backbone_forward(tape, batch_a, leaves, context.backbone), leaves)
        z_p = project(backbone_forward(tape, batch_p, leaves, context.backbone), leaves)
        return prototype_scores(z_a, leaves), prototype_scores(z_p, leaves)

    tape = Tape()
    s_a, s_p = scores(tape, tape.watch(params))
    q_a = sinkhorn_codes(s_a.value, n_iters, temperature)
    q_p = sinkhorn_codes(s_p.value, n_iters, temperature)

    def fn(tape, leaves):
        s_anchor, s_positive = scores(tape, leaves)
        return swapped_terms(s_anchor, s_positive, q_a, q_p, temperature)

    return fn


@dataclass
class GradCheckCase:
    name: str
    seed: int
    result: GradCheckResult


def check_variant(variant: BackboneVariant, seed: int, max_entries: int = 2, tolerance: float = 1e-4,
                  conv_layers: int = 1) -> GradCheckCase:
    context = toy_context(seed, variant, conv_layers=conv_layers)
    rng = derive_rng(seed, "gradcheck")
    params = init_backbone(context.backbone, context.dims, derive_rng(seed, "backbone")).merged(
        init_head(context.backbone.hidden_dim, derive_rng(seed, "head")))
    ids = list(context.dataset.ids[:6])
    targets = rng.uniform(0.05, 0.95, size=len(ids))
    result = gradcheck(regression_loss(context, ids, targets), params, max_entries_per_param=max_entries,
                       rng=rng, kink_tolerance=tolerance)
    return GradCheckCase(name=f"{variant.value}/regression", seed=seed, result=result)


def check_swapped(variant: BackboneVariant, seed: int, max_entries: int = 2,
                  tolerance: float = 1e-4) -> GradCheckCase:
    context = toy_context(seed, variant)
    rng = derive_rng(seed, "gradcheck")
    bank = PrototypeBank(n_prototypes=4, prototype_dim=8, temperature=0.5)
    params = init_backbone(context.backbone, context.dims, derive_rng(seed, "backbone")).merged(
        bank.init(context.backbone.hidden_dim, derive_rng(seed, "prototypes")))
    ids = list(context.dataset.ids)
    anchors, positives = ids[:4], ids[4:8]
    fn = contrastive_loss(context, anchors, positives, params, bank.temperature, n_iters=3)
    result = gradcheck(fn, params, max_entries_per_param=max_entries, rng=rng, kink_tolerance=tolerance)
    return GradCheckCase(name=f"{variant.value}/swapped", seed=seed, result=result)


CHECKS: Dict[str, Callable[..., GradCheckCase]] = {
    "regression": check_variant,
    "swapped": check_swapped,
}


def run_gradchecks(seeds: List[int], variants: Optional[List[BackboneVariant]] = None,
                   tolerance: float = 1e-4, max_entries: int = 2) -> List[GradCheckCase]:
    """Every (check, variant, seed) combination; raises NumericError if any exceeds the tolerance."""
    variants = variants or list(BackboneVariant)
    cases = [
        check(variant, seed, max_entries=max_entries, tolerance=tolerance)
        for check in CHECKS.values()
        for variant in variants
        for seed in seeds
    ]
    failures = [c for c in cases if not c.result.ok(tolerance)]
    worst = max(cases, key=lambda c: c.result.max_rel_error)
    logger.info("Gradient check finished", cases=len(cases), failures=len(failures),
                worst_case=worst.name, worst_error=worst.result.max_rel_error)
    if failures:
        raise NumericError(
            f"{len(failures)} gradient checks exceed {tolerance:g}",
            detail={"failures": [f"{c.name}@{c.seed}:{c.result.worst_param}" for c in failures[:10]]},
        )
    return cases
