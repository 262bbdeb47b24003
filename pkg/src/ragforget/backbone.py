"""Frozen candidate generators: BPR matrix factorization and LightGCN.

Both models share one training engine. LightGCN scores with the layer-mean of
propagated embeddings; with ``num_layers=0`` propagation is the identity and the
engine performs exactly the BPR updates.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import as_dataset, check_positive_int, digest_bytes
from .exceptions import CheckpointError, EmptyTrainingSet, MissingCheckpoint, UnknownUser

logger = logging.getLogger(__name__)

KINDS = ("bpr", "lightgcn")
NEG_INF = float("-inf")

_MAGIC = b"RGFB"
_VERSION = 1
_HEADER = struct.Struct("<4sHBxIIIq")


@dataclass(frozen=True)
class BackboneConfig:
    embedding_dim: int = 64
    epochs: int = 30
    learning_rate: float = 0.05
    l2_reg: float = 1e-4
    negatives_per_positive: int = 1
    num_layers: int = 3
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        check_positive_int(self.embedding_dim, "embedding_dim")
        check_positive_int(self.epochs, "epochs", allow_zero=True)
        check_positive_int(self.negatives_per_positive, "negatives_per_positive")
        check_positive_int(self.num_layers, "num_layers", allow_zero=True)
        check_positive_int(self.batch_size, "batch_size")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.l2_reg < 0:
            raise ValueError("l2_reg must be >= 0")

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True, eq=False)
class BackboneModel:
    user_embeddings: np.ndarray
    item_embeddings: np.ndarray
    user_ids: np.ndarray
    item_ids: np.ndarray
    kind: str = "bpr"
    seed: int = 0
    trained_on_fingerprint: str = ""
    _user_pos: dict = field(init=False, repr=False)
    _item_pos: dict = field(init=False, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        ue = np.ascontiguousarray(self.user_embeddings, dtype=np.float32)
        ie = np.ascontiguousarray(self.item_embeddings, dtype=np.float32)
        if ue.ndim != 2 or ie.ndim != 2 or ue.shape[1] != ie.shape[1]:
            raise ValueError("embedding matrices must be 2-D with equal width")
        if not (np.isfinite(ue).all() and np.isfinite(ie).all()):
            raise ValueError("embeddings contain non-finite values")
        uid = np.asarray(self.user_ids, dtype=np.int64)
        iid = np.asarray(self.item_ids, dtype=np.int64)
        if len(uid) != len(ue) or len(iid) != len(ie):
            raise ValueError("id maps do not match embedding rows")
        upos = {u: k for k, u in enumerate(uid.tolist())}
        ipos = {i: k for k, i in enumerate(iid.tolist())}
        if len(upos) != len(uid) or len(ipos) != len(iid):
            raise ValueError("id maps must be bijective")
        for arr in (ue, ie, uid, iid):
            arr.setflags(write=False)
        object.__setattr__(self, "user_embeddings", ue)
        object.__setattr__(self, "item_embeddings", ie)
        object.__setattr__(self, "user_ids", uid)
        object.__setattr__(self, "item_ids", iid)
        object.__setattr__(self, "_user_pos", upos)
        object.__setattr__(self, "_item_pos", ipos)

    @property
    def dim(self):
        return self.user_embeddings.shape[1]

    def has_user(self, user_id):
        return int(user_id) in self._user_pos

    def has_item(self, item_id):
        return int(item_id) in self._item_pos

    def user_row(self, user_id):
        return self._user_pos.get(int(user_id))

    def item_row(self, item_id):
        return self._item_pos.get(int(item_id))

    def item_vectors(self, item_ids):
        rows = [self._item_pos[int(i)] for i in item_ids]
        return self.item_embeddings[rows].astype(np.float64)

    def user_scores(self, user_id):
        """Scores of every known item for one user, aligned with ``item_ids``."""
        row = self._user_pos.get(int(user_id))
        if row is None:
            raise UnknownUser(user_id)
        return self.item_embeddings.astype(np.float64) @ self.user_embeddings[row].astype(np.float64)

    def checksum(self):
        return digest_bytes(self.user_embeddings.tobytes(), self.item_embeddings.tobytes(),
                            self.user_ids.tobytes(), self.item_ids.tobytes())

    def save(self, path):
        """Write the portable little-endian checkpoint."""
        m, d = self.user_embeddings.shape
        n = self.item_embeddings.shape[0]
        fp = self.trained_on_fingerprint.encode("ascii")
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(_MAGIC, _VERSION, KINDS.index(self.kind), m, n, d, self.seed))
            fh.write(self.user_embeddings.astype("<f4").tobytes())
            fh.write(self.item_embeddings.astype("<f4").tobytes())
            for ids in (self.user_ids, self.item_ids):
                fh.write(struct.pack("<Q", len(ids)))
                fh.write(ids.astype("<i8").tobytes())
            fh.write(struct.pack("<H", len(fp)))
            fh.write(fp)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.exists():
            raise MissingCheckpoint(str(path))
        buf = path.read_bytes()
        try:
            magic, version, kind, m, n, d, seed = _HEADER.unpack_from(buf, 0)
            if magic != _MAGIC or version != _VERSION:
                raise CheckpointError(f"{path}: not a backbone checkpoint")
            off = _HEADER.size
            ue = np.frombuffer(buf, "<f4", m * d, off).reshape(m, d)
            off += 4 * m * d
            ie = np.frombuffer(buf, "<f4", n * d, off).reshape(n, d)
            off += 4 * n * d
            ids = []
            for _ in range(2):
                (count,) = struct.unpack_from("<Q", buf, off)
                off += 8
                ids.append(np.frombuffer(buf, "<i8", count, off))
                off += 8 * count
            (fplen,) = struct.unpack_from("<H", buf, off)
            fp = buf[off + 2: off + 2 + fplen].decode("ascii")
        except (struct.error, ValueError) as exc:
            raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({exc})") from exc
        return cls(ue.copy(), ie.copy(), ids[0].copy(), ids[1].copy(),
                   kind=KINDS[kind], seed=seed, trained_on_fingerprint=fp)


@dataclass(frozen=True)
class CandidateList:
    user_id: int
    items: tuple
    backbone_scores: tuple

    def __len__(self):
        return len(self.items)

    def __iter__(self):
        return iter(self.items)


def _normalized_adjacency(u_rows, i_rows, n_users, n_items):
    """Symmetric D^-1/2 A D^-1/2 of the user-item bipartite graph."""
    n = n_users + n_items
    rows = np.concatenate([u_rows, i_rows + n_users])
    cols = np.concatenate([i_rows + n_users, u_rows])
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    adj.sum_duplicates()
    adj.data[:] = 1.0
    deg = np.asarray(adj.sum(axis=1)).ravel()
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = deg[nz] ** -0.5
    d = sp.diags(inv_sqrt)
    return (d @ adj @ d).tocsr()


def _propagate(adj, emb, num_layers):
    """Mean of layers 0..num_layers. Linear and symmetric, so it is its own adjoint."""
    if num_layers == 0:
        return emb
    acc = emb.copy()
    layer = emb
    for _ in range(num_layers):
        layer = adj @ layer
        acc += layer
    return acc / (num_layers + 1)


def _sample_negatives(rng, users, n_items, seen_keys):
    """Uniform item rows not interacted with by each user (rejection sampling)."""
    neg = rng.integers(0, n_items, size=len(users))
    bad = np.isin(users * n_items + neg, seen_keys, assume_unique=False)
    tries = 0
    while bad.any():
        idx = np.flatnonzero(bad)
        neg[idx] = rng.integers(0, n_items, size=len(idx))
        bad[idx] = np.isin(users[idx] * n_items + neg[idx], seen_keys)
        tries += 1
        if tries > 1000:
            raise RuntimeError("negative sampling failed; some user has seen every item")
    return neg


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def _train(data, config, num_layers):
    if len(data) == 0:
        raise EmptyTrainingSet("cannot train a backbone on an empty dataset")
    user_ids = data.user_ids
    item_ids = data.item_ids
    m, n = len(user_ids), len(item_ids)
    u_rows = np.searchsorted(user_ids, data.users)
    i_rows = np.searchsorted(item_ids, data.items)
    seen_keys = np.unique(u_rows * n + i_rows)
    if config.epochs and np.any(np.bincount(u_rows, minlength=m) >= n):
        raise EmptyTrainingSet("a user has interacted with every item; no negatives exist")

    rng = np.random.default_rng(config.seed)
    d = config.embedding_dim
    emb = rng.normal(0.0, 0.1, size=(m + n, d))
    adj = _normalized_adjacency(u_rows, i_rows, m, n) if num_layers > 0 else None
    lr, reg = config.learning_rate, config.l2_reg
    losses = []
    for epoch in range(config.epochs):
        order = np.tile(rng.permutation(len(u_rows)), config.negatives_per_positive)
        bu = u_rows[order]
        bi = i_rows[order]
        bj = _sample_negatives(rng, bu, n, seen_keys)
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            su = bu[start:start + config.batch_size]
            si = bi[start:start + config.batch_size] + m
            sj = bj[start:start + config.batch_size] + m
            final = _propagate(adj, emb, num_layers) if num_layers else emb
            eu, ei, ej = final[su], final[si], final[sj]
            diff = ei - ej
            x = np.einsum("ij,ij->i", eu, diff)
            total -= _log_sigmoid(x).sum()
            g = -np.exp(_log_sigmoid(-x))[:, None]  # d/dx of -ln sigmoid(x)
            grad = np.zeros_like(emb)
            np.add.at(grad, su, g * diff)
            np.add.at(grad, si, g * eu)
            np.add.at(grad, sj, -g * eu)
            if num_layers:
                grad = _propagate(adj, grad, num_layers)
            rows = np.concatenate([su, si, sj])
            np.add.at(grad, rows, 2.0 * reg * emb[rows])
            emb -= lr * grad
        losses.append(total / len(order))
        logger.debug("epoch %d mean bpr loss %.5f", epoch, losses[-1])
    final = _propagate(adj, emb, num_layers) if num_layers else emb
    return final[:m], final[m:], user_ids, item_ids, losses


def _fingerprint(data):
    return data.checksum()


def train_bpr(train, config=None):
    """Fit BPR-MF on ``train`` and return the frozen model."""
    config = config or BackboneConfig()
    data = as_dataset(train)
    ue, ie, uid, iid, _ = _train(data, config, 0)
    return BackboneModel(ue, ie, uid, iid, kind="bpr", seed=config.seed,
                         trained_on_fingerprint=_fingerprint(data))


def train_lightgcn(train, config=None):
    """Fit LightGCN (layer-mean of normalized propagation) with the BPR loss."""
    config = config or BackboneConfig()
    data = as_dataset(train)
    ue, ie, uid, iid, _ = _train(data, config, config.num_layers)
    return BackboneModel(ue, ie, uid, iid, kind="lightgcn", seed=config.seed,
                         trained_on_fingerprint=_fingerprint(data))


def score(model, user_id, item_id):
    """Dot-product preference; unknown users or items score ``-inf``."""
    u = model.user_row(user_id)
    i = model.item_row(item_id)
    if u is None or i is None:
        return NEG_INF
    return float(np.dot(model.user_embeddings[u].astype(np.float64),
                        model.item_embeddings[i].astype(np.float64)))


def top_k_candidates(model, user_id, k=50, exclude=()):
    """Highest-scoring ``k`` items not in ``exclude``; ties go to the smaller item id."""
    k = check_positive_int(k, "k")
    scores = model.user_scores(user_id)
    if exclude:
        mask = np.isin(model.item_ids, np.fromiter(exclude, dtype=np.int64, count=len(exclude)))
        scores = np.where(mask, NEG_INF, scores)
        eligible = int((~mask).sum())
    else:
        eligible = len(scores)
    # item_ids ascending, so a stable sort on -score breaks ties by id.
    order = np.argsort(-scores, kind="stable")[: min(k, eligible)]
    return CandidateList(int(user_id), tuple(model.item_ids[order].tolist()),
                         tuple(scores[order].tolist()))


class BPR(BaseEstimator):
    """Bayesian personalized ranking matrix factorization.

    ``fit`` accepts a :class:`~ragforget.corpus.Dataset` or an integer array whose
    first two columns are user and item ids; ratings are treated as implicit
    positives. After fitting, ``model_`` holds the frozen :class:`BackboneModel`.
    """

    _kind = "bpr"

    def __init__(self, embedding_dim=64, epochs=30, learning_rate=0.05, l2_reg=1e-4,
                 negatives_per_positive=1, batch_size=256, seed=0):
        self.embedding_dim = embedding_dim
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.l2_reg = l2_reg
        self.negatives_per_positive = negatives_per_positive
        self.batch_size = batch_size
        self.seed = seed

    def _config(self):
        params = self.get_params()
        return BackboneConfig(**params)

    def _layers(self):
        return 0

    def fit(self, X, y=None):
        data = as_dataset(X)
        config = self._config()
        ue, ie, uid, iid, losses = _train(data, config, self._layers())
        self.model_ = BackboneModel(ue, ie, uid, iid, kind=self._kind, seed=config.seed,
                                    trained_on_fingerprint=_fingerprint(data))
        self.loss_history_ = losses
        return self

    def predict(self, X):
        """Scores for each (user, item) row of ``X``."""
        check_is_fitted(self, "model_")
        X = np.asarray(X, dtype=np.int64)
        return np.array([score(self.model_, u, i) for u, i in X[:, :2]])

    def recommend(self, user_id, k=50, exclude=()):
        check_is_fitted(self, "model_")
        return top_k_candidates(self.model_, user_id, k, exclude)


class LightGCN(BPR):
    """LightGCN: BPR loss on the mean of ``num_layers`` propagation steps."""

    _kind = "lightgcn"

    def __init__(self, embedding_dim=64, epochs=30, learning_rate=0.05, l2_reg=1e-4,
                 negatives_per_positive=1, batch_size=256, num_layers=3, seed=0):
        super().__init__(embedding_dim=embedding_dim, epochs=epochs, learning_rate=learning_rate,
                         l2_reg=l2_reg, negatives_per_positive=negatives_per_positive,
                         batch_size=batch_size, seed=seed)
        self.num_layers = num_layers

    def _layers(self):
        return self.num_layers


def train_backbone(kind, train, config=None):
    if kind == "bpr":
        return train_bpr(train, config)
    if kind == "lightgcn":
        return train_lightgcn(train, config)
    raise ValueError(f"unknown backbone kind {kind!r}")
