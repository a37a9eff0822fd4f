"""MLP interaction model: forward pass, exact backprop, and Hessian-vector
products over a selectable parameter subset.

The prediction feeds the concatenated user/item embedding through fully
connected layers (nonlinear hidden activations, identity output).  Per-example
loss is ``(pred - y)^2`` plus l2 on embeddings and layer weights.

Hessian-vector products use a forward-over-reverse pass: a directional
(R-)derivative is propagated alongside both the forward activations and the
backward sensitivities.  This yields exact curvature for tanh; relu uses its
almost-everywhere second derivative (zero away from the kink).  Per-example
Hessian shares carry ``2 l2 I`` on the penalized coordinates of the chosen
subset, mirroring the inner-product model's convention.

Subsets:
  - ``"embeddings"``: the test pair's own rows (p_ut, q_it), length 2k
  - ``"network"``: all layer weights and biases, flattened
  - ``"full"``: every embedding row plus the network
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .model_core import ModelParams

_ACTIVATIONS = {
    "relu": (
        lambda a: np.maximum(a, 0.0),
        lambda a: (a > 0.0).astype(np.float64),
        lambda a: np.zeros_like(a),
    ),
    "tanh": (
        np.tanh,
        lambda a: 1.0 - np.tanh(a) ** 2,
        lambda a: -2.0 * np.tanh(a) * (1.0 - np.tanh(a) ** 2),
    ),
    "identity": (
        lambda a: a,
        lambda a: np.ones_like(a),
        lambda a: np.zeros_like(a),
    ),
}


@dataclass
class NcfArchitecture:
    """Layer widths from input (2k) to output (1) plus the hidden activation."""

    layer_widths: list[int]
    activation: str = "relu"

    def __post_init__(self):
        if len(self.layer_widths) < 2:
            raise ValueError("need at least one layer (input and output widths)")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError("layer widths must be positive")
        if self.layer_widths[-1] != 1:
            raise ValueError("output width must be 1")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @classmethod
    def default(cls, k: int) -> "NcfArchitecture":
        """Tower layout: 2k -> 2k -> k -> 1 with relu."""
        return cls([2 * k, 2 * k, k, 1], "relu")


@dataclass
class ForwardCache:
    """Input and pre-/post-activation vectors saved by the forward pass."""

    user: int
    item: int
    x: np.ndarray
    pre: list[np.ndarray]
    post: list[np.ndarray]

    @property
    def prediction(self) -> float:
        return float(self.post[-1][0, 0])


def _layers(params: ModelParams) -> list[tuple[np.ndarray, np.ndarray]]:
    if params.kind != "ncf" or not params.mlp:
        raise ValueError("params do not describe an MLP model")
    return [(w.astype(np.float64, copy=False), b.astype(np.float64, copy=False)) for w, b in params.mlp]


def _batch_forward(params: ModelParams, x: np.ndarray):
    """Forward over a (B, 2k) input block; returns (pred, pre, post) lists."""
    act, _, _ = _ACTIVATIONS[params.activation]
    layers = _layers(params)
    z = x
    pre, post = [], []
    last = len(layers) - 1
    for l, (w, b) in enumerate(layers):
        a = z @ w.T + b
        pre.append(a)
        z = a if l == last else act(a)
        post.append(z)
    return post[-1][:, 0], pre, post


def ncf_predict_batch(params: ModelParams, u_idx: np.ndarray, i_idx: np.ndarray) -> np.ndarray:
    x = np.concatenate(
        [
            params.user_emb[u_idx].astype(np.float64, copy=False),
            params.item_emb[i_idx].astype(np.float64, copy=False),
        ],
        axis=1,
    )
    preds, _, _ = _batch_forward(params, x)
    return preds


def ncf_forward(params: ModelParams, user: int, item: int) -> tuple[float, ForwardCache]:
    """Predict one pair and keep the activations for a later backward pass."""
    x = np.concatenate([params.user_emb[user], params.item_emb[item]]).astype(np.float64)[None, :]
    preds, pre, post = _batch_forward(params, x)
    return float(preds[0]), ForwardCache(user=user, item=item, x=x, pre=pre, post=post)


def _batch_backward(params: ModelParams, x, pre, post, seed: np.ndarray):
    """Backprop a (B,) output sensitivity; returns dX, [dW], [db] (batch sums)."""
    _, dact, _ = _ACTIVATIONS[params.activation]
    layers = _layers(params)
    g = seed[:, None]
    dws: list[np.ndarray] = [None] * len(layers)
    dbs: list[np.ndarray] = [None] * len(layers)
    for l in range(len(layers) - 1, -1, -1):
        w, _ = layers[l]
        below = x if l == 0 else post[l - 1]
        dws[l] = g.T @ below
        dbs[l] = g.sum(axis=0)
        dz = g @ w
        if l > 0:
            g = dz * dact(pre[l - 1])
    return dz, dws, dbs


def ncf_backward(
    params: ModelParams, cache: ForwardCache, y: float, l2_coeff: float
) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    """Exact gradients of one record's loss over (its embedding rows, network).

    Returns ``(grad_e, grad_n)`` where ``grad_e`` has length 2k covering the
    record's own p_u and q_i, and ``grad_n`` mirrors the layer list.
    """
    e = cache.prediction - y
    dx, dws, dbs = _batch_backward(params, cache.x, cache.pre, cache.post, np.array([2.0 * e]))
    grad_e = dx[0] + 2.0 * l2_coeff * cache.x[0]
    grad_n = [
        (dw + 2.0 * l2_coeff * w.astype(np.float64), db)
        for (dw, db), (w, _) in zip(zip(dws, dbs), params.mlp)
    ]
    return grad_e, grad_n


def prediction_gradient(
    params: ModelParams, user: int, item: int
) -> tuple[np.ndarray, list[tuple[np.ndarray, np.ndarray]]]:
    """Gradients of the prediction itself (not the loss) at one pair."""
    _, cache = ncf_forward(params, user, item)
    dx, dws, dbs = _batch_backward(params, cache.x, cache.pre, cache.post, np.array([1.0]))
    return dx[0], list(zip(dws, dbs))


def network_shapes(params: ModelParams) -> list[tuple[int, ...]]:
    shapes = []
    for w, b in params.mlp:
        shapes.extend([w.shape, b.shape])
    return shapes


def flatten_network(pairs: list[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([w.ravel(), b.ravel()]) for w, b in pairs])


def unflatten_network(vec: np.ndarray, params: ModelParams) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    pos = 0
    for w, b in params.mlp:
        rw = vec[pos:pos + w.size].reshape(w.shape)
        pos += w.size
        rb = vec[pos:pos + b.size]
        pos += b.size
        out.append((rw, rb))
    if pos != vec.size:
        raise ValueError("network vector has the wrong length")
    return out


def network_l2_mask(params: ModelParams) -> np.ndarray:
    """1.0 on weight coordinates, 0.0 on biases, in flattened order."""
    parts = []
    for w, b in params.mlp:
        parts.append(np.ones(w.size))
        parts.append(np.zeros(b.size))
    return np.concatenate(parts)


def _rop_pass(params: ModelParams, x, rx, rlayers, y):
    """Forward-over-reverse pass for a batch.

    Propagates the directional derivative (rx on inputs, rlayers on weights)
    through the loss gradient.  Returns the R-derivatives of (dL/dx, dL/dW,
    dL/db) as batch-level quantities: rdx is per-example (B, 2k); rdw/rdb are
    summed over the batch.
    """
    act, dact, ddact = _ACTIVATIONS[params.activation]
    layers = _layers(params)
    last = len(layers) - 1

    # forward with tangent
    z, rz = x, rx
    pre, post, rpre, rpost = [], [], [], []
    for l, (w, b) in enumerate(layers):
        rw, rb = rlayers[l] if rlayers is not None else (None, None)
        a = z @ w.T + b
        ra = rz @ w.T
        if rw is not None:
            ra = ra + z @ rw.T + rb
        pre.append(a)
        rpre.append(ra)
        if l == last:
            z, rz = a, ra
        else:
            z = act(a)
            rz = dact(a) * ra
        post.append(z)
        rpost.append(rz)

    pred = post[-1][:, 0]
    e = pred - y
    g = (2.0 * e)[:, None]
    rg = 2.0 * rpost[-1]

    rdws: list[np.ndarray] = [None] * len(layers)
    rdbs: list[np.ndarray] = [None] * len(layers)
    for l in range(last, -1, -1):
        w, _ = layers[l]
        rw = rlayers[l][0] if rlayers is not None else None
        below = x if l == 0 else post[l - 1]
        rbelow = rx if l == 0 else rpost[l - 1]
        rdws[l] = rg.T @ below + g.T @ rbelow
        rdbs[l] = rg.sum(axis=0)
        dz = g @ w
        rdz = rg @ w
        if rw is not None:
            rdz = rdz + g @ rw
        if l > 0:
            d = dact(pre[l - 1])
            rg = rdz * d + dz * ddact(pre[l - 1]) * rpre[l - 1]
            g = dz * d
    rdx = rdz
    return rdx, rdws, rdbs


def _gather_inputs(ds: Dataset, params: ModelParams, points: np.ndarray):
    u = ds.user_idx[points]
    i = ds.item_idx[points]
    y = ds.ratings[points]
    x = np.concatenate(
        [params.user_emb[u].astype(np.float64), params.item_emb[i].astype(np.float64)], axis=1
    )
    return u, i, y, x


def ncf_hvp(
    v: np.ndarray,
    points: np.ndarray,
    ds: Dataset,
    params: ModelParams,
    subset: str,
    l2_coeff: float,
    damping: float,
    test_pair: tuple[int, int] | None = None,
) -> np.ndarray:
    """(H_subset + damping I) v, averaging per-example curvature over points."""
    points = np.asarray(points)
    if len(points) == 0:
        raise ValueError("no training points given")
    v = np.asarray(v, dtype=np.float64)
    k = params.k
    u, i, y, x = _gather_inputs(ds, params, points)
    m = len(points)

    if subset == "embeddings":
        if test_pair is None:
            raise ValueError("embeddings subset needs the test pair")
        u_t, i_t = test_pair
        if v.shape[0] != 2 * k:
            raise ValueError("vector must have length 2k")
        rx = np.zeros_like(x)
        rx[u == u_t, :k] = v[:k]
        rx[i == i_t, k:] = v[k:]
        rdx, _, _ = _rop_pass(params, x, rx, None, y)
        out = np.zeros(2 * k)
        out[:k] = rdx[u == u_t, :k].sum(axis=0)
        out[k:] = rdx[i == i_t, k:].sum(axis=0)
        out /= m
        out += (2.0 * l2_coeff + damping) * v
        return out

    if subset == "network":
        rlayers = unflatten_network(v, params)
        rx = np.zeros_like(x)
        _, rdws, rdbs = _rop_pass(params, x, rx, rlayers, y)
        out = flatten_network(list(zip(rdws, rdbs))) / m
        out += 2.0 * l2_coeff * network_l2_mask(params) * v
        out += damping * v
        return out

    if subset == "full":
        emb_dim = (params.num_users + params.num_items) * k
        off = params.num_users * k
        vu = v[:off].reshape(params.num_users, k)
        vi = v[off:emb_dim].reshape(params.num_items, k)
        rlayers = unflatten_network(v[emb_dim:], params)
        rx = np.concatenate([vu[u], vi[i]], axis=1)
        rdx, rdws, rdbs = _rop_pass(params, x, rx, rlayers, y)
        out_u = np.zeros((params.num_users, k))
        out_i = np.zeros((params.num_items, k))
        np.add.at(out_u, u, rdx[:, :k])
        np.add.at(out_i, i, rdx[:, k:])
        out = np.concatenate(
            [out_u.ravel(), out_i.ravel(), flatten_network(list(zip(rdws, rdbs)))]
        )
        out /= m
        l2_vec = np.concatenate([np.ones(emb_dim), network_l2_mask(params)])
        out += 2.0 * l2_coeff * l2_vec * v
        out += damping * v
        return out

    raise ValueError(f"unknown subset {subset!r}")


def ncf_batch_gradient(
    params: ModelParams, u_idx: np.ndarray, i_idx: np.ndarray, y: np.ndarray
) -> tuple[float, list[np.ndarray]]:
    """Summed squared error and summed data gradients over a batch.

    Output follows :func:`model_core.param_arrays` order (embedding tables
    then W/b per layer) and excludes l2, which the training loop applies.
    """
    x = np.concatenate(
        [
            params.user_emb[u_idx].astype(np.float64, copy=False),
            params.item_emb[i_idx].astype(np.float64, copy=False),
        ],
        axis=1,
    )
    preds, pre, post = _batch_forward(params, x)
    e = preds - y
    dx, dws, dbs = _batch_backward(params, x, pre, post, 2.0 * e)
    k = params.k
    grad_u = np.zeros(params.user_emb.shape)
    grad_i = np.zeros(params.item_emb.shape)
    np.add.at(grad_u, u_idx, dx[:, :k])
    np.add.at(grad_i, i_idx, dx[:, k:])
    grads = [grad_u, grad_i]
    for dw, db in zip(dws, dbs):
        grads.extend([dw, db])
    return float(np.sum(e * e)), grads
