"""Inverse-Hessian-vector-product solver and the influence estimators.

Each estimator answers: how would the trained model's prediction at a test
pair (u_t, i_t) change if one interacting training record were removed?

  - ``influence_basic_mf`` / ``influence_basic_ncf`` solve one damped linear
    system over the *full* parameter vector per test case, then take one
    inner product per interacting record.  Cost grows with the training set.
  - ``influence_fia_mf`` restricts everything to the test pair's own 2k-dim
    embedding block: records outside R_t = R_ut ∪ R_it have zero gradient and
    curvature there, so a 2k-dim solve over just R_t suffices.
  - ``influence_fia_ncf`` applies the same restriction to the embedding part;
    ``mode="exact"`` adds the interaction-network term, whose Hessian is
    averaged over the whole training set.

Sign convention: a positive score means removing the record would raise the
prediction.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .model_core import ModelParams
from . import mf as mf_mod
from . import ncf as ncf_mod

logger = logging.getLogger(__name__)


@dataclass
class CgConfig:
    """Conjugate-gradient settings for the damped inverse-Hessian solves."""

    max_iterations: int = 100
    residual_tolerance: float = 1e-8
    damping: float = 1e-6

    def __post_init__(self):
        if self.residual_tolerance <= 0:
            raise ValueError("residual_tolerance must be > 0")
        if self.damping < 0:
            raise ValueError("damping must be >= 0")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")


@dataclass
class CgResult:
    solution: np.ndarray
    converged: bool
    relative_residual: float
    iterations: int


@dataclass
class TestCase:
    """A (user, item) pair in internal indices, optionally with the held-out rating."""

    user: int
    item: int
    true_rating: float | None = None


@dataclass
class InfluenceScore:
    """Predicted prediction change if one training record were removed.

    ``side`` records whether the training point shares the test user
    (``"user"``), the test item (``"item"``), or is the test pair itself
    (``"both"``).
    """

    train_index: int
    delta_g: float
    side: str


def solve_inverse_hvp(b: np.ndarray, hvp, cfg: CgConfig) -> CgResult:
    """Solve (H + damping I) t = b by conjugate gradients.

    ``hvp`` applies the undamped symmetric operator; the configured damping is
    added here.  Stops when the relative residual drops below the tolerance,
    otherwise returns the final iterate with ``converged=False``.
    """
    b = np.asarray(b, dtype=np.float64)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return CgResult(np.zeros_like(b), True, 0.0, 0)

    def apply(v):
        return hvp(v) + cfg.damping * v

    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    iterations = 0
    for _ in range(cfg.max_iterations):
        ap = apply(p)
        if not np.all(np.isfinite(ap)):
            raise FloatingPointError("non-finite values in Hessian-vector product")
        curvature = float(p @ ap)
        if curvature == 0.0:
            break
        alpha = rs / curvature
        x += alpha * p
        r -= alpha * ap
        iterations += 1
        rs_new = float(r @ r)
        if not np.isfinite(rs_new):
            raise FloatingPointError("conjugate gradient diverged")
        if np.sqrt(rs_new) <= cfg.residual_tolerance * b_norm:
            rs = rs_new
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    rel = float(np.sqrt(rs)) / b_norm
    converged = rel <= cfg.residual_tolerance
    if not converged:
        logger.warning(
            "CG stopped after %d iterations with relative residual %.3e", iterations, rel
        )
    return CgResult(x, converged, rel, iterations)


def interacting_records(ds: Dataset, user: int, item: int) -> tuple[np.ndarray, list[str]]:
    """Indices of R_ut ∪ R_it in ascending order, with the side of each."""
    user_recs = set(ds.by_user[user].tolist())
    item_recs = set(ds.by_item[item].tolist())
    indices = sorted(user_recs | item_recs)
    sides = []
    for j in indices:
        if j in user_recs and j in item_recs:
            sides.append("both")
        elif j in user_recs:
            sides.append("user")
        else:
            sides.append("item")
    return np.array(indices, dtype=np.int64), sides


def influence_fia_mf(
    tc: TestCase, train: Dataset, params: ModelParams, cfg: CgConfig, l2_coeff: float = 0.0
) -> list[InfluenceScore]:
    """Fast restricted-block influence for the inner-product model.

    One 2k-dimensional damped solve over the interacting records R_t, then an
    inner product per record:

        delta_g(z) = (1/n') grad_block(g)^T (H_t + damping I)^{-1} grad_block(L(z))
    """
    if params.kind != "mf":
        raise ValueError("influence_fia_mf needs an mf model")
    rt, sides = interacting_records(train, tc.user, tc.item)
    if len(rt) == 0:
        raise ValueError("no interacting training points")
    k = params.k
    p = params.user_emb[tc.user].astype(np.float64)
    q = params.item_emb[tc.item].astype(np.float64)
    b = np.concatenate([q, p])  # gradient of the prediction over (p_ut, q_it)
    op = mf_mod.RestrictedMfHessian(train, params, (tc.user, tc.item), rt, l2_coeff)
    s = solve_inverse_hvp(b, op.matvec, cfg).solution
    n_prime = len(rt)
    scores = []
    for j, side in zip(rt, sides):
        gp, gq = mf_mod.mf_grad_example(
            params, int(train.user_idx[j]), int(train.item_idx[j]), float(train.ratings[j]), l2_coeff
        )
        dot = 0.0
        if side in ("user", "both"):
            dot += float(gp @ s[:k])
        if side in ("item", "both"):
            dot += float(gq @ s[k:])
        scores.append(InfluenceScore(int(j), dot / n_prime, side))
    return scores


def influence_basic_mf(
    tc: TestCase, train: Dataset, params: ModelParams, cfg: CgConfig, l2_coeff: float = 0.0
) -> list[InfluenceScore]:
    """Full-parameter influence for the inner-product model.

    One damped solve over the complete embedding table (every training record
    contributes curvature), then an inner product per interacting record:

        delta_g(z) = (1/n) grad(g)^T (H + damping I)^{-1} grad(L(z))
    """
    if params.kind != "mf":
        raise ValueError("influence_basic_mf needs an mf model")
    rt, sides = interacting_records(train, tc.user, tc.item)
    if len(rt) == 0:
        raise ValueError("no interacting training points")
    k = params.k
    op = mf_mod.FullMfHessian(train, params, l2_coeff)
    b = np.zeros(op.dim)
    b[tc.user * k:(tc.user + 1) * k] = params.item_emb[tc.item]
    off = params.num_users * k
    b[off + tc.item * k:off + (tc.item + 1) * k] = params.user_emb[tc.user]
    s = solve_inverse_hvp(b, op.matvec, cfg).solution
    scores = []
    for j, side in zip(rt, sides):
        grad = mf_mod.mf_grad_full(
            params, int(train.user_idx[j]), int(train.item_idx[j]), float(train.ratings[j]), l2_coeff
        )
        scores.append(InfluenceScore(int(j), grad.dot_full(s, params.num_users) / train.n, side))
    return scores


def _loss_influence_basic_mf(
    tc: TestCase,
    y_test: float,
    train: Dataset,
    params: ModelParams,
    cfg: CgConfig,
    l2_coeff: float = 0.0,
) -> list[InfluenceScore]:
    """Influence of removals on the *test loss* rather than the prediction.

    Internal utility kept for parity checks: with squared loss the test-loss
    gradient is 2 e_test times the prediction gradient, so these scores equal
    2 e_test times :func:`influence_basic_mf`'s.
    """
    rt, sides = interacting_records(train, tc.user, tc.item)
    if len(rt) == 0:
        raise ValueError("no interacting training points")
    op = mf_mod.FullMfHessian(train, params, l2_coeff)
    test_grad = mf_mod.mf_grad_full(params, tc.user, tc.item, y_test, l2_coeff=0.0)
    b = test_grad.to_dense(params.num_users, params.num_items)
    s = solve_inverse_hvp(b, op.matvec, cfg).solution
    scores = []
    for j, side in zip(rt, sides):
        grad = mf_mod.mf_grad_full(
            params, int(train.user_idx[j]), int(train.item_idx[j]), float(train.ratings[j]), l2_coeff
        )
        scores.append(InfluenceScore(int(j), grad.dot_full(s, params.num_users) / train.n, side))
    return scores


def influence_fia_ncf(
    tc: TestCase,
    train: Dataset,
    params: ModelParams,
    cfg: CgConfig,
    l2_coeff: float = 0.0,
    mode: str = "approx",
    network_sample: int | None = None,
    sample_seed: int = 0,
) -> list[InfluenceScore]:
    """Restricted influence for the MLP model.

    ``approx`` keeps only the embedding-block term (the test pair's own rows,
    Hessian over R_t).  ``exact`` adds the interaction-network term, whose
    Hessian is averaged over the whole training set (optionally a seeded
    sample of ``network_sample`` points).
    """
    if params.kind != "ncf":
        raise ValueError("influence_fia_ncf needs an ncf model")
    if mode not in ("approx", "exact"):
        raise ValueError(f"unknown mode {mode!r}")
    rt, sides = interacting_records(train, tc.user, tc.item)
    if len(rt) == 0:
        raise ValueError("no interacting training points")
    k = params.k
    n_prime = len(rt)

    grad_e_pred, grad_n_pred = ncf_mod.prediction_gradient(params, tc.user, tc.item)
    s_e = solve_inverse_hvp(
        grad_e_pred,
        lambda v: ncf_mod.ncf_hvp(
            v, rt, train, params, "embeddings", l2_coeff, 0.0, test_pair=(tc.user, tc.item)
        ),
        cfg,
    ).solution

    s_n = None
    if mode == "exact":
        if train.n > 100_000 and network_sample is None:
            warnings.warn(
                "exact mode averages network curvature over the whole training set; "
                "this is expensive for large datasets",
                stacklevel=2,
            )
        pts = np.arange(train.n)
        if network_sample is not None and network_sample < train.n:
            pts = np.random.default_rng(sample_seed).choice(train.n, network_sample, replace=False)
        b_n = ncf_mod.flatten_network(grad_n_pred)
        s_n = solve_inverse_hvp(
            b_n,
            lambda v: ncf_mod.ncf_hvp(v, pts, train, params, "network", l2_coeff, 0.0),
            cfg,
        ).solution

    scores = []
    for j, side in zip(rt, sides):
        u_j, i_j = int(train.user_idx[j]), int(train.item_idx[j])
        _, cache = ncf_mod.ncf_forward(params, u_j, i_j)
        grad_e, grad_n = ncf_mod.ncf_backward(params, cache, float(train.ratings[j]), l2_coeff)
        dot = 0.0
        if side in ("user", "both"):
            dot += float(grad_e[:k] @ s_e[:k])
        if side in ("item", "both"):
            dot += float(grad_e[k:] @ s_e[k:])
        delta = dot / n_prime
        if s_n is not None:
            delta += float(ncf_mod.flatten_network(grad_n) @ s_n) / train.n
        scores.append(InfluenceScore(int(j), delta, side))
    return scores


def influence_basic_ncf(
    tc: TestCase, train: Dataset, params: ModelParams, cfg: CgConfig, l2_coeff: float = 0.0
) -> list[InfluenceScore]:
    """Full-parameter influence for the MLP model (baseline).

    One damped solve over all embeddings plus the network, curvature averaged
    over every training record.
    """
    if params.kind != "ncf":
        raise ValueError("influence_basic_ncf needs an ncf model")
    rt, sides = interacting_records(train, tc.user, tc.item)
    if len(rt) == 0:
        raise ValueError("no interacting training points")
    k = params.k
    emb_dim = (params.num_users + params.num_items) * k
    off = params.num_users * k

    grad_e_pred, grad_n_pred = ncf_mod.prediction_gradient(params, tc.user, tc.item)
    b = np.zeros(emb_dim + ncf_mod.flatten_network(grad_n_pred).size)
    b[tc.user * k:(tc.user + 1) * k] = grad_e_pred[:k]
    b[off + tc.item * k:off + (tc.item + 1) * k] = grad_e_pred[k:]
    b[emb_dim:] = ncf_mod.flatten_network(grad_n_pred)

    all_pts = np.arange(train.n)
    s = solve_inverse_hvp(
        b,
        lambda v: ncf_mod.ncf_hvp(v, all_pts, train, params, "full", l2_coeff, 0.0),
        cfg,
    ).solution

    scores = []
    for j, side in zip(rt, sides):
        u_j, i_j = int(train.user_idx[j]), int(train.item_idx[j])
        _, cache = ncf_mod.ncf_forward(params, u_j, i_j)
        grad_e, grad_n = ncf_mod.ncf_backward(params, cache, float(train.ratings[j]), l2_coeff)
        dot = float(grad_e[:k] @ s[u_j * k:(u_j + 1) * k])
        dot += float(grad_e[k:] @ s[off + i_j * k:off + (i_j + 1) * k])
        dot += float(ncf_mod.flatten_network(grad_n) @ s[emb_dim:])
        scores.append(InfluenceScore(int(j), dot / train.n, side))
    return scores


def compute_influence(
    method: str,
    tc: TestCase,
    train: Dataset,
    params: ModelParams,
    cfg: CgConfig,
    l2_coeff: float = 0.0,
) -> list[InfluenceScore]:
    """Dispatch by method name ('fia', 'ia', 'fia-exact') and model kind."""
    if params.kind == "mf":
        if method in ("fia", "fia-exact"):
            return influence_fia_mf(tc, train, params, cfg, l2_coeff)
        if method == "ia":
            return influence_basic_mf(tc, train, params, cfg, l2_coeff)
    else:
        if method == "fia":
            return influence_fia_ncf(tc, train, params, cfg, l2_coeff, mode="approx")
        if method == "fia-exact":
            return influence_fia_ncf(tc, train, params, cfg, l2_coeff, mode="exact")
        if method == "ia":
            return influence_basic_ncf(tc, train, params, cfg, l2_coeff)
    raise ValueError(f"unknown influence method {method!r}")
