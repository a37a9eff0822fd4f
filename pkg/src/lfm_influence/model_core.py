"""Shared model state, training objective, Adam optimizer, and checkpoints.

Both recommender kinds store user/item embedding tables here; the neural
variant adds a stack of fully connected layers.  Training minimizes

    mean squared prediction error + l2 * ||theta||^2

over all embeddings and layer weights (biases are not penalized), using
mini-batch Adam with a seeded shuffle so runs are reproducible bit-for-bit.

Checkpoints are a small binary container: magic ``LFMI``, a format version,
a JSON metadata block, the parameter tensors as little-endian float32 arrays,
and a trailing CRC32.  Parameters returned by :func:`train` are float32 so a
save/load round trip reproduces them exactly.
"""

from __future__ import annotations

import json
import logging
import struct
import zlib
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import Dataset

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LFMI"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """A checkpoint file is unreadable: bad magic, version, or checksum."""


class TrainingDivergedError(RuntimeError):
    """Non-finite loss encountered during training."""

    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


@dataclass
class Hyperparams:
    """Training configuration shared by both model kinds."""

    k: int = 8
    learning_rate: float = 0.001
    batch_size: int = 3000
    l2_coeff: float = 0.001
    epochs: int = 50
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.l2_coeff < 0:
            raise ValueError("l2_coeff must be >= 0")
        if not (0.0 < self.adam_beta1 < 1.0 and 0.0 < self.adam_beta2 < 1.0):
            raise ValueError("adam betas must lie in (0, 1)")
        if self.adam_eps <= 0:
            raise ValueError("adam_eps must be > 0")

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "l2_coeff": self.l2_coeff,
            "epochs": self.epochs,
            "seed": self.seed,
            "adam_beta1": self.adam_beta1,
            "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        return cls(**d)


@dataclass
class ModelParams:
    """Embedding tables plus (for the neural kind) layer weights.

    ``mlp`` is a list of ``(W, b)`` pairs; ``W`` has shape (out, in).  The
    first layer consumes the concatenated user/item embedding (width 2k), the
    last produces a scalar.  ``kind`` is ``"mf"`` or ``"ncf"``.
    """

    user_emb: np.ndarray
    item_emb: np.ndarray
    mlp: list[tuple[np.ndarray, np.ndarray]] | None = None
    kind: str = "mf"
    activation: str = "relu"

    def __post_init__(self):
        if self.kind not in ("mf", "ncf"):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if self.user_emb.shape[1] != self.item_emb.shape[1]:
            raise ValueError("user and item embeddings must share the latent dimension")
        if self.kind == "ncf":
            if not self.mlp:
                raise ValueError("ncf params need at least one layer")
            if self.mlp[0][0].shape[1] != 2 * self.k:
                raise ValueError("first layer input width must be 2k")
            if self.mlp[-1][0].shape[0] != 1:
                raise ValueError("last layer must produce a scalar")

    @property
    def k(self) -> int:
        return self.user_emb.shape[1]

    @property
    def num_users(self) -> int:
        return self.user_emb.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_emb.shape[0]

    @property
    def num_params(self) -> int:
        total = self.user_emb.size + self.item_emb.size
        if self.mlp:
            total += sum(w.size + b.size for w, b in self.mlp)
        return total

    def copy(self) -> "ModelParams":
        mlp = [(w.copy(), b.copy()) for w, b in self.mlp] if self.mlp else None
        return ModelParams(self.user_emb.copy(), self.item_emb.copy(), mlp, self.kind, self.activation)

    def astype(self, dtype) -> "ModelParams":
        mlp = [(w.astype(dtype), b.astype(dtype)) for w, b in self.mlp] if self.mlp else None
        return ModelParams(
            self.user_emb.astype(dtype), self.item_emb.astype(dtype), mlp, self.kind, self.activation
        )


def param_arrays(params: ModelParams) -> list[np.ndarray]:
    """Flatten params into the declared tensor order: user, item, W1, b1, ..."""
    arrays = [params.user_emb, params.item_emb]
    if params.mlp:
        for w, b in params.mlp:
            arrays.extend([w, b])
    return arrays


def params_from_arrays(arrays: list[np.ndarray], template: ModelParams) -> ModelParams:
    mlp = None
    if template.mlp:
        rest = arrays[2:]
        mlp = [(rest[2 * j], rest[2 * j + 1]) for j in range(len(template.mlp))]
    return ModelParams(arrays[0], arrays[1], mlp, template.kind, template.activation)


def l2_mask(params: ModelParams) -> list[bool]:
    """Which arrays in :func:`param_arrays` order carry the l2 penalty.

    Embeddings and layer weights do; biases do not.
    """
    mask = [True, True]
    if params.mlp:
        for _ in params.mlp:
            mask.extend([True, False])
    return mask


@dataclass
class AdamState:
    """First/second moment accumulators, one per parameter array."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step_count: int = 0

    @classmethod
    def zeros_like(cls, arrays: list[np.ndarray]) -> "AdamState":
        return cls(
            m=[np.zeros_like(a) for a in arrays],
            v=[np.zeros_like(a) for a in arrays],
            step_count=0,
        )


def squared_loss(prediction: float, y: float) -> float:
    """Squared prediction error for one example."""
    return (prediction - y) ** 2


def predict_batch(params: ModelParams, u_idx: np.ndarray, i_idx: np.ndarray) -> np.ndarray:
    """Model predictions for aligned user/item index arrays."""
    if params.kind == "mf":
        pu = params.user_emb[u_idx].astype(np.float64, copy=False)
        qi = params.item_emb[i_idx].astype(np.float64, copy=False)
        return np.einsum("ij,ij->i", pu, qi)
    from . import ncf

    return ncf.ncf_predict_batch(params, u_idx, i_idx)


def objective(params: ModelParams, train: Dataset, l2_coeff: float) -> float:
    """Mean per-example squared loss plus l2 * ||theta||^2 (biases excluded)."""
    if params.num_users < train.user_idx.max() + 1 or params.num_items < train.item_idx.max() + 1:
        raise ValueError("params are too small for this dataset")
    preds = predict_batch(params, train.user_idx, train.item_idx)
    mse = float(np.mean((preds - train.ratings) ** 2))
    reg = sum(
        float(np.sum(a.astype(np.float64) ** 2))
        for a, penalized in zip(param_arrays(params), l2_mask(params))
        if penalized
    )
    return mse + l2_coeff * reg


def objective_gradient(params: ModelParams, train: Dataset, l2_coeff: float) -> list[np.ndarray]:
    """Analytic gradient of :func:`objective`, in :func:`param_arrays` order."""
    if params.kind == "mf":
        from . import mf

        sq_sum, grads = mf.mf_batch_gradient(params, train.user_idx, train.item_idx, train.ratings)
    else:
        from . import ncf

        sq_sum, grads = ncf.ncf_batch_gradient(params, train.user_idx, train.item_idx, train.ratings)
    out = []
    for g, a, penalized in zip(grads, param_arrays(params), l2_mask(params)):
        g = g / train.n
        if penalized and l2_coeff:
            g = g + 2.0 * l2_coeff * a
        out.append(g)
    return out


def adam_step(
    arrays: list[np.ndarray],
    grads: list[np.ndarray],
    state: AdamState,
    hp: Hyperparams,
) -> tuple[list[np.ndarray], AdamState]:
    """One bias-corrected Adam update; returns new arrays and state."""
    if len(arrays) != len(grads) or any(a.shape != g.shape for a, g in zip(arrays, grads)):
        raise ValueError("parameter and gradient shapes do not match")
    t = state.step_count + 1
    b1, b2 = hp.adam_beta1, hp.adam_beta2
    new_arrays, new_m, new_v = [], [], []
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        new_arrays.append(a - hp.learning_rate * m_hat / (np.sqrt(v_hat) + hp.adam_eps))
        new_m.append(m)
        new_v.append(v)
    return new_arrays, AdamState(m=new_m, v=new_v, step_count=t)


def init_params(
    kind: str,
    num_users: int,
    num_items: int,
    hp: Hyperparams,
    architecture=None,
) -> ModelParams:
    """Seeded Normal(0, 0.01^2) init for embeddings and weights, zero biases."""
    rng = np.random.default_rng(hp.seed)
    user_emb = 0.01 * rng.standard_normal((num_users, hp.k))
    item_emb = 0.01 * rng.standard_normal((num_items, hp.k))
    if kind == "mf":
        return ModelParams(user_emb, item_emb, None, "mf")
    from .ncf import NcfArchitecture

    if architecture is None:
        architecture = NcfArchitecture.default(hp.k)
    if architecture.layer_widths[0] != 2 * hp.k:
        raise ValueError("architecture input width must equal 2k")
    mlp = []
    widths = architecture.layer_widths
    for w_in, w_out in zip(widths[:-1], widths[1:]):
        mlp.append((0.01 * rng.standard_normal((w_out, w_in)), np.zeros(w_out)))
    return ModelParams(user_emb, item_emb, mlp, "ncf", architecture.activation)


def train(
    kind: str,
    train_ds: Dataset,
    hp: Hyperparams,
    architecture=None,
    until_converged: bool = False,
    callback=None,
) -> tuple[ModelParams, list[float]]:
    """Mini-batch Adam training; returns final params and per-epoch train RMSE.

    Shuffling and initialization are seeded from ``hp.seed``, so identical
    inputs give identical parameters.  With ``until_converged`` the loop stops
    once train RMSE changes by less than 1e-4 over 3 consecutive epochs.
    Returned parameters are float32.
    """
    if train_ds.n == 0:
        raise ValueError("training set is empty")
    params = init_params(kind, train_ds.num_users, train_ds.num_items, hp, architecture)
    if kind == "mf":
        from .mf import mf_batch_gradient as batch_gradient
    else:
        from .ncf import ncf_batch_gradient as batch_gradient

    arrays = param_arrays(params)
    mask = l2_mask(params)
    state = AdamState.zeros_like(arrays)
    rng = np.random.default_rng(hp.seed + 0x5F5E100)
    rmse_log: list[float] = []
    for epoch in range(hp.epochs):
        perm = rng.permutation(train_ds.n)
        for start in range(0, train_ds.n, hp.batch_size):
            batch = perm[start:start + hp.batch_size]
            current = params_from_arrays(arrays, params)
            sq_sum, grads = batch_gradient(
                current, train_ds.user_idx[batch], train_ds.item_idx[batch], train_ds.ratings[batch]
            )
            if not np.isfinite(sq_sum):
                raise TrainingDivergedError(epoch, start // hp.batch_size)
            b = len(batch)
            grads = [
                g / b + (2.0 * hp.l2_coeff * a if penalized and hp.l2_coeff else 0.0)
                for g, a, penalized in zip(grads, arrays, mask)
            ]
            arrays, state = adam_step(arrays, grads, state, hp)
        current = params_from_arrays(arrays, params)
        preds = predict_batch(current, train_ds.user_idx, train_ds.item_idx)
        rmse = float(np.sqrt(np.mean((preds - train_ds.ratings) ** 2)))
        rmse_log.append(rmse)
        if callback is not None:
            callback(epoch, rmse)
        if until_converged and len(rmse_log) >= 4:
            window = rmse_log[-4:]
            if max(window) - min(window) < 1e-4:
                logger.info("train RMSE plateaued at epoch %d (%.6f)", epoch, rmse)
                break
    final = params_from_arrays(arrays, params).astype(np.float32)
    return final, rmse_log


@dataclass
class Checkpoint:
    """Everything needed to reload a trained model and its data indexing."""

    hyperparams: Hyperparams
    params: ModelParams
    user_ids: list[str]
    item_ids: list[str]
    train_rmse: list[float] = field(default_factory=list)
    final_epoch: int = 0
    extra: dict = field(default_factory=dict)


def _write_tensor(chunks: list[bytes], a: np.ndarray) -> None:
    data = np.ascontiguousarray(a, dtype="<f4")
    chunks.append(struct.pack("<I", data.size))
    chunks.append(data.tobytes())


def save_checkpoint(cp: Checkpoint, path) -> None:
    """Serialize a checkpoint; parameters are stored as little-endian float32."""
    meta = {
        "hyperparams": cp.hyperparams.to_dict(),
        "kind": cp.params.kind,
        "activation": cp.params.activation,
        "layer_widths": (
            [cp.params.mlp[0][0].shape[1]] + [w.shape[0] for w, _ in cp.params.mlp]
            if cp.params.mlp
            else None
        ),
        "num_users": cp.params.num_users,
        "num_items": cp.params.num_items,
        "user_ids": cp.user_ids,
        "item_ids": cp.item_ids,
        "train_rmse": cp.train_rmse,
        "final_epoch": cp.final_epoch,
        "extra": cp.extra,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(meta_bytes)), meta_bytes]
    for a in param_arrays(cp.params):
        _write_tensor(chunks, a)
    body = b"".join(chunks)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<I", crc))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, count: int) -> bytes:
        if self.pos + count > len(self.buf):
            raise CheckpointError("truncated checkpoint file")
        out = self.buf[self.pos:self.pos + count]
        self.pos += count
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def tensor(self, shape) -> np.ndarray:
        count = self.u32()
        expected = int(np.prod(shape))
        if count != expected:
            raise CheckpointError(f"tensor of {count} values where {expected} expected")
        return np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape).copy()


def load_checkpoint(path) -> Checkpoint:
    """Read a checkpoint, verifying magic, version, and CRC32."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise CheckpointError("truncated checkpoint file")
    body, crc_bytes = raw[:-4], raw[-4:]
    if (zlib.crc32(body) & 0xFFFFFFFF) != struct.unpack("<I", crc_bytes)[0]:
        raise CheckpointError("checksum mismatch")
    r = _Reader(body)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format version {version}")
    meta = json.loads(r.take(r.u32()).decode("utf-8"))
    hp = Hyperparams.from_dict(meta["hyperparams"])
    k = hp.k
    user_emb = r.tensor((meta["num_users"], k))
    item_emb = r.tensor((meta["num_items"], k))
    mlp = None
    if meta["kind"] == "ncf":
        widths = meta["layer_widths"]
        mlp = []
        for w_in, w_out in zip(widths[:-1], widths[1:]):
            w = r.tensor((w_out, w_in))
            b = r.tensor((w_out,))
            mlp.append((w, b))
    params = ModelParams(user_emb, item_emb, mlp, meta["kind"], meta["activation"])
    return Checkpoint(
        hyperparams=hp,
        params=params,
        user_ids=meta["user_ids"],
        item_ids=meta["item_ids"],
        train_rmse=meta["train_rmse"],
        final_epoch=meta["final_epoch"],
        extra=meta.get("extra", {}),
    )
