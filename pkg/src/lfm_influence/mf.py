"""Inner-product model: prediction, per-example gradients, and Hessian-vector
products on either the test pair's own embedding block or the full table.

For one record with user vector p, item vector q, rating y, and residual
e = p.q - y, the per-example loss is

    L = e^2 + l2 * (||p||^2 + ||q||^2)

whose derivative blocks are

    dL/dp       = 2 e q + 2 l2 p
    dL/dq       = 2 e p + 2 l2 q
    d2L/dp dp   = 2 q q^T
    d2L/dq dq   = 2 p p^T
    d2L/dp dq   = 2 q p^T + 2 e I

Per-example Hessian shares additionally carry ``2 l2 I`` across the whole
active diagonal (not just the record's own rows) so that the averaged Hessian
is the curvature of the trained objective ``mse + l2 ||theta||^2``.  A record
(u_t, i, y) that merely shares the test user touches only the p-block of the
restricted Hessian: its own q_i is not part of the restricted block.

Full-space vectors are laid out as ``concat(user_emb.ravel(), item_emb.ravel())``
so user row u occupies coordinates [u*k, u*k + k).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .model_core import ModelParams


@dataclass
class SubParams:
    """View of the test pair's own embedding block (p_u, q_i)."""

    pu: np.ndarray
    qi: np.ndarray
    user: int
    item: int


def sub_params(params: ModelParams, user: int, item: int) -> SubParams:
    return SubParams(
        pu=params.user_emb[user].astype(np.float64),
        qi=params.item_emb[item].astype(np.float64),
        user=user,
        item=item,
    )


def mf_predict(pu: np.ndarray, qi: np.ndarray) -> float:
    """Inner-product rating prediction."""
    pu = np.asarray(pu, dtype=np.float64)
    qi = np.asarray(qi, dtype=np.float64)
    if pu.shape != qi.shape:
        raise ValueError(f"latent vectors differ in length: {pu.shape} vs {qi.shape}")
    return float(pu @ qi)


def mf_grad_example(
    params: ModelParams, user: int, item: int, y: float, l2_coeff: float
) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of one record's loss over its own (p_u, q_i) block."""
    p = params.user_emb[user].astype(np.float64)
    q = params.item_emb[item].astype(np.float64)
    e = p @ q - y
    return 2.0 * e * q + 2.0 * l2_coeff * p, 2.0 * e * p + 2.0 * l2_coeff * q


@dataclass
class SparseGrad:
    """Full-parameter gradient of one record's loss; nonzero on two rows."""

    user: int
    item: int
    grad_p: np.ndarray
    grad_q: np.ndarray

    def to_dense(self, num_users: int, num_items: int) -> np.ndarray:
        k = self.grad_p.shape[0]
        out = np.zeros((num_users + num_items) * k)
        out[self.user * k:(self.user + 1) * k] = self.grad_p
        off = num_users * k
        out[off + self.item * k:off + (self.item + 1) * k] = self.grad_q
        return out

    def dot_full(self, vec: np.ndarray, num_users: int) -> float:
        k = self.grad_p.shape[0]
        off = num_users * k
        return float(
            self.grad_p @ vec[self.user * k:(self.user + 1) * k]
            + self.grad_q @ vec[off + self.item * k:off + (self.item + 1) * k]
        )


def mf_grad_full(params: ModelParams, user: int, item: int, y: float, l2_coeff: float) -> SparseGrad:
    """Same formulas as :func:`mf_grad_example`, addressed in the full space."""
    gp, gq = mf_grad_example(params, user, item, y, l2_coeff)
    return SparseGrad(user=user, item=item, grad_p=gp, grad_q=gq)


class RestrictedMfHessian:
    """Averaged Hessian of the interacting records over (p_ut, q_it).

    Precomputes the gathered item rows of the test user's records, the user
    rows of the test item's records, and their residuals, so one product
    costs O(n' k).  ``matvec`` applies the undamped operator (data + l2).
    """

    def __init__(
        self,
        ds: Dataset,
        params: ModelParams,
        test_pair: tuple[int, int],
        rt_indices: np.ndarray,
        l2_coeff: float,
    ):
        if len(rt_indices) == 0:
            raise ValueError("no interacting training points")
        self.k = params.k
        self.l2_coeff = l2_coeff
        self.n_prime = len(rt_indices)
        u_t, i_t = test_pair
        self.p = params.user_emb[u_t].astype(np.float64)
        self.q = params.item_emb[i_t].astype(np.float64)

        u = ds.user_idx[rt_indices]
        i = ds.item_idx[rt_indices]
        y = ds.ratings[rt_indices]
        user_side = (u == u_t) & (i != i_t)
        item_side = (i == i_t) & (u != u_t)
        pair = (u == u_t) & (i == i_t)
        # item rows rated by the test user, user rows that rated the test item
        self.q_rows = params.item_emb[i[user_side]].astype(np.float64)
        self.p_rows = params.user_emb[u[item_side]].astype(np.float64)
        self.pair_count = int(pair.sum())
        self.pair_e = (self.p @ self.q - y[pair]) if self.pair_count else np.zeros(0)

    def matvec(self, v: np.ndarray) -> np.ndarray:
        k = self.k
        vp, vq = v[:k], v[k:]
        out_p = 2.0 * (self.q_rows.T @ (self.q_rows @ vp))
        out_q = 2.0 * (self.p_rows.T @ (self.p_rows @ vq))
        if self.pair_count:
            # every duplicate of the pair record contributes the full 2x2 block
            c = self.pair_count
            qv, pv = self.q @ vp, self.p @ vq
            e_sum = float(self.pair_e.sum())
            out_p += 2.0 * c * (qv + pv) * self.q + 2.0 * e_sum * vq
            out_q += 2.0 * c * (qv + pv) * self.p + 2.0 * e_sum * vp
        out = np.concatenate([out_p, out_q]) / self.n_prime
        out += 2.0 * self.l2_coeff * v
        return out


def mf_hvp_restricted(
    v: np.ndarray,
    test_pair: tuple[int, int],
    rt_indices: np.ndarray,
    ds: Dataset,
    params: ModelParams,
    l2_coeff: float,
    damping: float,
) -> np.ndarray:
    """(H_restricted + damping I) v for the test pair's 2k-dim block."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != 2 * params.k:
        raise ValueError("vector must have length 2k")
    op = RestrictedMfHessian(ds, params, test_pair, np.asarray(rt_indices), l2_coeff)
    return op.matvec(v) + damping * v


class FullMfHessian:
    """Averaged Hessian over all training records, applied matrix-free.

    One product costs O(n k): gather the record rows of v, combine with the
    precomputed embedding rows and residuals, and scatter back with bincount.
    """

    def __init__(self, ds: Dataset, params: ModelParams, l2_coeff: float):
        self.k = params.k
        self.num_users = params.num_users
        self.num_items = params.num_items
        self.l2_coeff = l2_coeff
        self.n = ds.n
        self.u = ds.user_idx
        self.i = ds.item_idx
        self.p_rows = params.user_emb[self.u].astype(np.float64)
        self.q_rows = params.item_emb[self.i].astype(np.float64)
        self.e = np.einsum("ij,ij->i", self.p_rows, self.q_rows) - ds.ratings

    @property
    def dim(self) -> int:
        return (self.num_users + self.num_items) * self.k

    def matvec(self, v: np.ndarray) -> np.ndarray:
        k = self.k
        off = self.num_users * k
        vu = v[:off].reshape(self.num_users, k)
        vi = v[off:].reshape(self.num_items, k)
        vp = vu[self.u]
        vq = vi[self.i]
        s = np.einsum("ij,ij->i", self.q_rows, vp) + np.einsum("ij,ij->i", self.p_rows, vq)
        contrib_u = 2.0 * s[:, None] * self.q_rows + 2.0 * self.e[:, None] * vq
        contrib_i = 2.0 * s[:, None] * self.p_rows + 2.0 * self.e[:, None] * vp
        out_u = np.empty((self.num_users, k))
        out_i = np.empty((self.num_items, k))
        for col in range(k):
            out_u[:, col] = np.bincount(self.u, weights=contrib_u[:, col], minlength=self.num_users)
            out_i[:, col] = np.bincount(self.i, weights=contrib_i[:, col], minlength=self.num_items)
        out = np.concatenate([out_u.ravel(), out_i.ravel()]) / self.n
        out += 2.0 * self.l2_coeff * v
        return out


def mf_hvp_full(
    v: np.ndarray,
    ds: Dataset,
    params: ModelParams,
    l2_coeff: float,
    damping: float,
) -> np.ndarray:
    """(H_full + damping I) v over the complete embedding table."""
    v = np.asarray(v, dtype=np.float64)
    op = FullMfHessian(ds, params, l2_coeff)
    if v.shape[0] != op.dim:
        raise ValueError(f"vector must have length {op.dim}")
    return op.matvec(v) + damping * v


def mf_batch_gradient(
    params: ModelParams, u_idx: np.ndarray, i_idx: np.ndarray, y: np.ndarray
) -> tuple[float, list[np.ndarray]]:
    """Summed squared error and summed data gradients over a batch.

    Gradients are in :func:`model_core.param_arrays` order and exclude any l2
    term; the training loop adds regularization at the objective level.
    """
    p = params.user_emb[u_idx].astype(np.float64, copy=False)
    q = params.item_emb[i_idx].astype(np.float64, copy=False)
    e = np.einsum("ij,ij->i", p, q) - y
    gu_rows = 2.0 * e[:, None] * q
    gi_rows = 2.0 * e[:, None] * p
    grad_u = np.zeros(params.user_emb.shape)
    grad_i = np.zeros(params.item_emb.shape)
    np.add.at(grad_u, u_idx, gu_rows)
    np.add.at(grad_i, i_idx, gi_rows)
    return float(np.sum(e * e)), [grad_u, grad_i]
