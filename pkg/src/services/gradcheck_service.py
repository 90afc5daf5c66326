"""End-to-end gradient check of the full model on a small seeded problem."""
import logging
from dataclasses import dataclass

import numpy as np

from src.config import Config
from src.models.graph import build_csr
from src.models.hop_transformer import (ModelConfig, ModelParams, Readout, ce_loss, forward, init_params,
                                        loss_and_grad)
from src.services.hop2token_service import build_tokens
from src.utils.gradcheck import GradCheckReport, grad_check
from src.utils.rng import named_rng

logger = logging.getLogger(__name__)


@dataclass
class CheckProblem:
    params: ModelParams
    config: ModelConfig
    batch: np.ndarray
    targets: np.ndarray

    def loss(self, backward: bool) -> float:
        if backward:
            return loss_and_grad(self.params, self.config, self.batch, self.targets)
        logits, _ = forward(self.params, self.config, self.batch)
        return ce_loss(logits, self.targets)[0]


def make_problem(seed: int = 0, d_m: int = 16, K: int = 3, L: int = 2, heads: int = 2, c: int = 4, B: int = 3,
                 n: int = 12, d: int = 5, s: int = 2, readout: Readout = Readout.ATTENTION,
                 head_hidden: bool = False) -> CheckProblem:
    """Random connected graph through the real preprocessing path, one batch of B nodes.

    Norm and bias leaves are moved off their ones/zeros init so their
    gradients are checked at a generic point.
    """
    rng = named_rng(seed, 'gradcheck/problem')
    ring = np.stack([np.arange(n), (np.arange(n) + 1) % n], axis=1)
    upper = np.argwhere(np.triu(rng.random((n, n)) < 0.3, k=1))
    adjacency = build_csr(np.concatenate([ring, upper]), n)
    features = rng.standard_normal((n, d))
    tokens = build_tokens(adjacency, features, K, s, structural=s > 0)

    config = ModelConfig(K=K, d_prime=tokens.d_prime, d_m=d_m, L=L, heads=heads, c=c, readout=readout,
                         use_structural=s > 0, head_hidden=head_hidden)
    params = init_params(config, seed)
    for leaf in params:
        if not leaf.decay:
            leaf.value += 0.1 * rng.standard_normal(leaf.shape)
    ids = rng.choice(n, size=B, replace=False)
    return CheckProblem(params=params, config=config, batch=np.array(tokens.batch_view(ids)),
                        targets=rng.integers(0, c, size=B))


def check_model_gradients(seed: int = 0, tolerance: float = Config.GRADCHECK_TOLERANCE,
                          raise_on_failure: bool = False, **problem) -> GradCheckReport:
    p = make_problem(seed, **problem)
    logger.info(f"Gradient check: {len(p.params)} leaves, {p.params.num_scalars()} scalars, "
                f"tolerance {tolerance:g}")
    return grad_check(p.loss, p.params, tolerance=tolerance, seed=seed, raise_on_failure=raise_on_failure)
