"""Option-level response models: DP-IRT, DP-NMF and DP-BiDKT.

Every model maps a query (user, item, history) to one logit per option of
the item.  Options enter as learned per-option vectors, never as output
slots, so permuting an item's option rows permutes the logits the same
way and items may have different option counts.

Per-option tables are stored flat: item ``i`` owns rows
``offsets[i] : offsets[i] + options_per_item[i]``.  Batches pad queries to
the widest item and carry a validity mask.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .data import Dataset, OptionPrediction
from .rng import make_rng

CHECKPOINT_VERSION = 1
FAMILIES = ("irt", "nmf", "bidkt")


class ParameterStore(dict):
    """Named float64 parameter arrays with a stable flat layout."""

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.values()]) if self else np.zeros(0)

    def offsets(self) -> dict[str, tuple[int, int]]:
        out, pos = {}, 0
        for k, v in self.items():
            out[k] = (pos, pos + v.size)
            pos += v.size
        return out

    def unflatten(self, flat: np.ndarray) -> "ParameterStore":
        return ParameterStore(
            {k: flat[lo:hi].reshape(self[k].shape).copy() for k, (lo, hi) in self.offsets().items()}
        )

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.copy() for k, v in self.items()})

    @property
    def size(self) -> int:
        return int(sum(v.size for v in self.values()))


# ---------------------------------------------------------------------------
# forward functions (work on single queries and on padded batches alike)
# ---------------------------------------------------------------------------


def dp_irt_forward(theta, options, bias=None):
    """Logit of option k is ``theta . a_k + b_k``.

    ``theta`` is (..., d), ``options`` (..., J, d) and ``bias`` (..., J).
    """
    theta_t = ad.reshape(theta, theta.shape[:-1] + (1, theta.shape[-1])) if isinstance(theta, ad.Tensor) \
        else np.asarray(theta, dtype=np.float64)[..., None, :]
    if np.shape(options)[-1] != theta_t.shape[-1]:
        raise ad.ShapeError(f"dp_irt_forward: theta {np.shape(theta)} vs options {np.shape(options)}")
    logits = ad.sum(ad.multiply(theta_t, options), axis=-1)
    if bias is not None:
        logits = ad.add(logits, bias)
    return logits


def mlp_scorer_forward(user, options, weights):
    """Shared scorer over ``concat(user, option_k)`` for each option k.

    ``weights`` is a list of (W, b) pairs; hidden layers use ReLU and the
    last layer has width 1 and no bias (a constant shift of every logit
    cancels in the softmax).  The first layer's matrix is applied in two
    blocks (user rows, option rows), which equals multiplying the
    concatenation without materializing a per-option copy of ``user``.
    For a single affine layer the user block is the same for every option
    and is dropped for the same reason.
    """
    W0, b0 = weights[0]
    d_user = np.shape(user)[-1]
    if np.shape(W0)[0] != d_user + np.shape(options)[-1]:
        raise ad.ShapeError(f"scorer input {d_user}+{np.shape(options)[-1]} vs weight {np.shape(W0)}")
    h = ad.matmul(options, ad.take(W0, slice(d_user, None), axis=0))
    if len(weights) > 1:
        hu = ad.matmul(user, ad.take(W0, slice(0, d_user), axis=0))
        hu = ad.reshape(hu, hu.shape[:-1] + (1, hu.shape[-1]))
        h = ad.add(ad.add(h, hu), b0)
    for W, b in weights[1:]:
        h = ad.matmul(ad.relu(h), W)
        if b is not None:
            h = ad.add(h, b)
    return ad.reshape(h, h.shape[:-1])


def dp_nmf_forward(user, options, weights):
    """Logits ``scorer(concat(user, option_k))`` with one scorer shared by all options."""
    return mlp_scorer_forward(user, options, weights)


def option_probabilities(logits, correct: int) -> OptionPrediction:
    z = np.asarray(logits.value if isinstance(logits, ad.Tensor) else logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite logits")
    e = np.exp(z - z.max())
    return OptionPrediction(e / e.sum(), int(correct))


def masked_softmax(logits: np.ndarray, valid: np.ndarray) -> np.ndarray:
    z = np.where(valid, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(valid, np.exp(z), 0.0)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# model classes
# ---------------------------------------------------------------------------


@dataclass
class Batch:
    users: np.ndarray
    items: np.ndarray
    chosen: np.ndarray
    correct: np.ndarray
    # sequence models only
    seq_users: np.ndarray | None = None
    row: np.ndarray | None = None
    before: np.ndarray | None = None
    after: np.ndarray | None = None


class OptionLayout:
    """Row offsets of every item's options inside the flat option tables."""

    def __init__(self, options_per_item):
        self.options_per_item = np.asarray(options_per_item, dtype=np.int64)
        self.offsets = np.concatenate([[0], np.cumsum(self.options_per_item)[:-1]]).astype(np.int64)
        self.total = int(self.options_per_item.sum())
        self.width = int(self.options_per_item.max()) if len(self.options_per_item) else 0
        cols = np.arange(self.width)
        self.valid = cols[None, :] < self.options_per_item[:, None]
        self.rows = np.where(self.valid, self.offsets[:, None] + cols[None, :], 0)

    def option_rows(self, item: int) -> np.ndarray:
        return self.rows[item, : self.options_per_item[item]]


def _uniform(rng, shape, scale):
    return rng.uniform(-scale, scale, size=shape)


def _orthogonal(rng, rows, cols):
    q, r = np.linalg.qr(rng.standard_normal((max(rows, cols), min(rows, cols))))
    q = q * np.sign(np.diag(r))
    return q if rows >= cols else q.T


class DPModel:
    """Shared machinery: parameters, batching, prediction and checkpoints."""

    family = ""
    sequence = False

    def __init__(self, num_users: int, options_per_item, dim: int, layers: int = 1, seed: int = 0,
                 params: ParameterStore | None = None, **hyper):
        if dim < 1:
            raise ValueError("embedding dimension must be positive")
        self.num_users = int(num_users)
        self.layout = OptionLayout(options_per_item)
        self.dim = int(dim)
        self.layers = int(layers)
        self.seed = int(seed)
        self.hyper = dict(hyper)
        self.params = params if params is not None else self.init_params(make_rng(seed, 0x1217))

    @property
    def num_items(self) -> int:
        return len(self.layout.options_per_item)

    # subclasses --------------------------------------------------------
    def init_params(self, rng) -> ParameterStore:
        raise NotImplementedError

    def logits(self, leaves: dict[str, ad.Tensor], batch: Batch) -> ad.Tensor:
        raise NotImplementedError

    def user_representations(self) -> np.ndarray:
        raise NotImplementedError

    def option_tables(self) -> list[str]:
        """Names of parameters indexed by flat option row."""
        raise NotImplementedError

    # context (sequence models override) ---------------------------------
    def set_context(self, history: Dataset) -> None:
        pass

    def batches(self, part: Dataset, batch_size: int, rng=None) -> Iterator[Batch]:
        idx = np.arange(len(part)) if rng is None else rng.permutation(len(part))
        for lo in range(0, len(idx), batch_size):
            k = idx[lo : lo + batch_size]
            yield Batch(part.users[k], part.items[k], part.chosen[k], part.correct[k])

    # shared -------------------------------------------------------------
    def leaves(self, tape: ad.Tape, params: ParameterStore | None = None) -> dict[str, ad.Tensor]:
        params = self.params if params is None else params
        return {k: tape.leaf(v, k) for k, v in params.items()}

    def valid(self, batch: Batch) -> np.ndarray:
        return self.layout.valid[batch.items]

    def predict_logits(self, part: Dataset, batch_size: int = 4096) -> tuple[np.ndarray, np.ndarray]:
        """Padded logits and validity mask for every interaction of ``part``, in order."""
        out = np.zeros((len(part), self.layout.width))
        for lo in range(0, len(part), batch_size):
            k = np.arange(lo, min(lo + batch_size, len(part)))
            out[k] = self._logits_for(part.subset(k))
        return out, self.layout.valid[part.items]

    def _logits_for(self, part: Dataset) -> np.ndarray:
        tape = ad.Tape(grad=False)
        leaves = self.leaves(tape)
        result = np.zeros((len(part), self.layout.width))
        start = 0
        for b in self.batches(part, max(len(part), 1)):
            z = self.logits(leaves, b).value
            result[start : start + len(z)] = z
            start += len(z)
        return result

    def predict_probs(self, part: Dataset) -> np.ndarray:
        z, valid = self.predict_logits(part)
        return masked_softmax(z, valid)

    def forward(self, user: int, item: int, position: int | None = None) -> np.ndarray:
        """Logits over the ``item``'s options for a single query."""
        j = int(self.layout.options_per_item[item])
        part = Dataset(self.num_users, self.num_items, self.layout.options_per_item, [user], [item], [0], [0],
                       None if position is None else [position])
        return self._logits_for(part)[0, :j]

    def predict(self, user: int, item: int, correct: int, position: int | None = None) -> OptionPrediction:
        return option_probabilities(self.forward(user, item, position), correct)

    def permute_options(self, item: int, perm) -> "DPModel":
        """Copy of the model with item ``item``'s option rows reordered.

        New option k holds what was option ``perm[k]``.
        """
        rows = self.layout.option_rows(item)
        params = self.params.copy()
        for name in self.option_tables():
            params[name][rows] = self.params[name][rows[np.asarray(perm)]]
        clone = self.clone(params)
        return clone

    def clone(self, params: ParameterStore | None = None) -> "DPModel":
        return type(self)(self.num_users, self.layout.options_per_item, self.dim, self.layers, self.seed,
                          params=(params if params is not None else self.params.copy()), **self.hyper)

    # checkpoints ----------------------------------------------------------
    def meta(self) -> dict:
        return {
            "version": CHECKPOINT_VERSION,
            "family": self.family,
            "num_users": self.num_users,
            "options_per_item": self.layout.options_per_item.tolist(),
            "dim": self.dim,
            "layers": self.layers,
            "seed": self.seed,
            "hyper": self.hyper,
            "shapes": {k: list(v.shape) for k, v in self.params.items()},
        }

    def save(self, path) -> None:
        buf = io.BytesIO()
        np.savez(buf, __meta__=np.frombuffer(json.dumps(self.meta()).encode(), dtype=np.uint8),
                 **{f"p_{k}": v for k, v in self.params.items()})
        Path(path).write_bytes(buf.getvalue())


def load_model(path) -> DPModel:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
        params = ParameterStore({k: z[f"p_{k}"].copy() for k in meta["shapes"]})
    for k, shape in meta["shapes"].items():
        if list(params[k].shape) != shape:
            raise ValueError(f"checkpoint tensor {k} has shape {params[k].shape}, expected {shape}")
    cls = MODEL_CLASSES[meta["family"]]
    return cls(meta["num_users"], meta["options_per_item"], meta["dim"], meta["layers"], meta["seed"],
               params=params, **meta["hyper"])


class DpIrt(DPModel):
    """Softmax over ``theta_u . a_{i,k} + b_{i,k}``."""

    family = "irt"

    def init_params(self, rng):
        s = 1.0 / np.sqrt(self.dim)
        p = ParameterStore(
            user=_uniform(rng, (self.num_users, self.dim), s),
            option=_uniform(rng, (self.layout.total, self.dim), s),
        )
        if self.hyper.get("bias", True):
            p["bias"] = np.zeros(self.layout.total)
        return p

    def option_tables(self):
        return [k for k in ("option", "bias") if k in self.params]

    def logits(self, leaves, batch):
        rows = self.layout.rows[batch.items]
        theta = ad.gather_rows(leaves["user"], batch.users)
        options = ad.gather_rows(leaves["option"], rows)
        bias = ad.gather_rows(leaves["bias"], rows) if "bias" in leaves else None
        return dp_irt_forward(theta, options, bias)

    def user_representations(self):
        return self.params["user"].copy()


def _mlp_params(rng, p: ParameterStore, prefix: str, dims: list[int]):
    last = len(dims) - 2
    for k, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        p[f"{prefix}W{k}"] = _uniform(rng, (a, b), 1.0 / np.sqrt(a))
        if k < last:
            p[f"{prefix}b{k}"] = np.zeros(b)


def _mlp_weights(leaves, prefix: str, n: int):
    return [(leaves[f"{prefix}W{k}"], leaves.get(f"{prefix}b{k}")) for k in range(n)]


class DpNmf(DPModel):
    """Shared ReLU scorer over ``concat(user embedding, option embedding)``.

    ``layers`` counts linear layers: hidden widths equal ``dim`` and the
    final layer has width 1.  With one layer the scorer is affine.
    """

    family = "nmf"

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        if not 1 <= self.layers <= 4:
            raise ValueError("DP-NMF supports 1 to 4 layers")

    def init_params(self, rng):
        s = 1.0 / np.sqrt(self.dim)
        p = ParameterStore(
            user=_uniform(rng, (self.num_users, self.dim), s),
            option=_uniform(rng, (self.layout.total, self.dim), s),
        )
        _mlp_params(rng, p, "mlp_", [2 * self.dim] + [self.dim] * (self.layers - 1) + [1])
        return p

    def option_tables(self):
        return ["option"]

    def logits(self, leaves, batch):
        rows = self.layout.rows[batch.items]
        user = ad.gather_rows(leaves["user"], batch.users)
        options = ad.gather_rows(leaves["option"], rows)
        return dp_nmf_forward(user, options, _mlp_weights(leaves, "mlp_", self.layers))

    def user_representations(self):
        return self.params["user"].copy()


# ---------------------------------------------------------------------------
# bidirectional sequence model
# ---------------------------------------------------------------------------


def lstm_states(x, leaves, prefix: str, layers: int):
    """Run a stacked LSTM over x (B, T, in).

    Returns (B, T + 1, H): the learned initial state followed by the top
    layer's state after each step.
    """
    B = x.shape[0]
    for layer in range(layers):
        p = f"{prefix}{layer}_"
        H = leaves[p + "Wh"].shape[0]
        h0 = ad.add(np.zeros((B, H)), leaves[p + "h0"])
        c0 = ad.add(np.zeros((B, H)), leaves[p + "c0"])
        states = ad.lstm_layer(x, leaves[p + "Wx"], leaves[p + "Wh"], leaves[p + "b"], h0, c0)
        x = ad.take(states, slice(1, None), axis=1)
    return states


def dp_bidkt_context(fwd_states, bwd_states, row, before, after):
    """Context ``[forward state over `before` steps ; backward state over `after` steps]``.

    ``fwd_states``/``bwd_states`` are (S, T + 1, H); ``row`` picks the
    sequence and ``before``/``after`` count the history entries strictly
    before/after the target, so the target itself never enters.
    """
    S, T1, H = fwd_states.shape
    f = ad.gather_rows(ad.reshape(fwd_states, (S * T1, H)), row * T1 + before)
    r = ad.gather_rows(ad.reshape(bwd_states, (S * T1, H)), row * T1 + after)
    return ad.concat([f, r], axis=-1)


def dp_bidkt_forward(context, options, head):
    """Logits ``head(concat(context, option_k))`` for each candidate option."""
    return mlp_scorer_forward(context, options, head)


class DpBidkt(DPModel):
    """Bidirectional LSTM over a user's responses with an option-scoring head.

    Each response is embedded by its (item, chosen option) pair.  For a
    target at position p the forward chain reads the history strictly
    before p and the backward chain the history strictly after p.
    ``layers`` stacks LSTM layers inside each direction; the directions
    are never mixed below the head, which would leak the target.
    """

    family = "bidkt"
    sequence = True

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        if not 1 <= self.layers <= 4:
            raise ValueError("DP-BiDKT supports 1 to 4 layers")
        self._history: Dataset | None = None
        self._seq = None

    def init_params(self, rng):
        d = self.dim
        s = 1.0 / np.sqrt(d)
        p = ParameterStore(
            interaction=_uniform(rng, (self.layout.total + 1, d), s),
            option=_uniform(rng, (self.layout.total, d), s),
        )
        for direction in ("fwd", "bwd"):
            for layer in range(self.layers):
                pre = f"{direction}{layer}_"
                p[pre + "Wx"] = _uniform(rng, (d, 4 * d), s)
                p[pre + "Wh"] = np.hstack([_orthogonal(rng, d, d) for _ in range(4)])
                p[pre + "b"] = np.zeros(4 * d)
                p[pre + "h0"] = np.zeros(d)
                p[pre + "c0"] = np.zeros(d)
        _mlp_params(rng, p, "head_", [3 * d, d, 1])
        return p

    def option_tables(self):
        return ["option"]

    def permute_options(self, item, perm):
        # interaction embeddings are per (item, chosen option) and move with the options;
        # callers remap chosen indices in the history accordingly
        rows = self.layout.option_rows(item)
        clone = super().permute_options(item, perm)
        clone.params["interaction"][rows] = self.params["interaction"][rows[np.asarray(perm)]]
        if self._history is not None:
            clone.set_context(self._history)
        return clone

    # history handling -------------------------------------------------
    def set_context(self, history: Dataset) -> None:
        """Use ``history`` (usually the training part) as every user's sequence."""
        self._history = history
        order = np.lexsort((history.order, history.users))
        users = history.users[order]
        pos = history.order[order]
        rows = self.layout.offsets[history.items[order]] + history.chosen[order]
        starts = np.searchsorted(users, np.arange(self.num_users), side="left")
        ends = np.searchsorted(users, np.arange(self.num_users), side="right")
        self._seq = (pos, rows, starts, ends)

    def _require_context(self):
        if self._seq is None:
            raise RuntimeError("DP-BiDKT needs set_context(history) before use")

    def _sequences(self, seq_users):
        """Padded forward/backward input rows (S, T) for the given users."""
        pos, rows, starts, ends = self._seq
        lengths = ends[seq_users] - starts[seq_users]
        T = int(lengths.max()) if len(lengths) else 0
        pad = self.layout.total
        fwd = np.full((len(seq_users), T), pad, dtype=np.int64)
        bwd = np.full((len(seq_users), T), pad, dtype=np.int64)
        for s, u in enumerate(seq_users):
            r = rows[starts[u] : ends[u]]
            fwd[s, : len(r)] = r
            bwd[s, : len(r)] = r[::-1]
        return fwd, bwd

    def batches(self, part, batch_size, rng=None):
        """Group queries by user; ``batch_size`` counts user sequences per batch."""
        self._require_context()
        hist_pos, _, starts, ends = self._seq
        order = np.lexsort((np.arange(len(part)), part.users))
        users_all = np.unique(part.users)
        if rng is not None:
            users_all = users_all[rng.permutation(len(users_all))]
        seqs = self.hyper.get("seq_batch", 32) if batch_size is None else batch_size
        by_user_lo = np.searchsorted(part.users[order], users_all, side="left")
        by_user_hi = np.searchsorted(part.users[order], users_all, side="right")
        for lo in range(0, len(users_all), seqs):
            sel = slice(lo, lo + seqs)
            seq_users = users_all[sel]
            idx = np.concatenate([order[a:b] for a, b in zip(by_user_lo[sel], by_user_hi[sel])])
            row_of = {int(u): s for s, u in enumerate(seq_users)}
            row = np.array([row_of[int(u)] for u in part.users[idx]], dtype=np.int64)
            before = np.empty(len(idx), dtype=np.int64)
            after = np.empty(len(idx), dtype=np.int64)
            for k, (u, p) in enumerate(zip(part.users[idx].tolist(), part.order[idx].tolist())):
                hp = hist_pos[starts[u] : ends[u]]
                before[k] = np.searchsorted(hp, p, side="left")
                after[k] = len(hp) - np.searchsorted(hp, p, side="right")
            yield Batch(part.users[idx], part.items[idx], part.chosen[idx], part.correct[idx],
                        seq_users=seq_users, row=row, before=before, after=after)

    def _states(self, leaves, seq_users):
        fwd_rows, bwd_rows = self._sequences(seq_users)
        fwd_x = ad.gather_rows(leaves["interaction"], fwd_rows)
        bwd_x = ad.gather_rows(leaves["interaction"], bwd_rows)
        return (lstm_states(fwd_x, leaves, "fwd", self.layers),
                lstm_states(bwd_x, leaves, "bwd", self.layers))

    def logits(self, leaves, batch):
        F, R = self._states(leaves, batch.seq_users)
        ctx = dp_bidkt_context(F, R, batch.row, batch.before, batch.after)
        options = ad.gather_rows(leaves["option"], self.layout.rows[batch.items])
        return dp_bidkt_forward(ctx, options, _mlp_weights(leaves, "head_", 2))

    def predict_logits(self, part, batch_size=None):
        out = np.zeros((len(part), self.layout.width))
        tape = ad.Tape(grad=False)
        leaves = self.leaves(tape)
        # unshuffled batches() visit rows in (user, row) order
        order = np.lexsort((np.arange(len(part)), part.users))
        pos = 0
        for b in self.batches(part, self.hyper.get("seq_batch", 32)):
            z = self.logits(leaves, b).value
            out[order[pos : pos + len(z)]] = z
            pos += len(z)
        return out, self.layout.valid[part.items]

    def _logits_for(self, part):
        return self.predict_logits(part)[0]

    def user_representations(self):
        """Mean context vector over each user's history positions."""
        self._require_context()
        _, _, starts, ends = self._seq
        tape = ad.Tape(grad=False)
        leaves = self.leaves(tape)
        out = np.zeros((self.num_users, 2 * self.dim))
        users = np.arange(self.num_users)
        seqs = self.hyper.get("seq_batch", 32)
        for lo in range(0, self.num_users, seqs):
            seq_users = users[lo : lo + seqs]
            F, R = self._states(leaves, seq_users)
            for s, u in enumerate(seq_users):
                L = int(ends[u] - starts[u])
                if L == 0:
                    out[u] = np.concatenate([F.value[s, 0], R.value[s, 0]])
                    continue
                t = np.arange(L)
                out[u] = np.concatenate([F.value[s, t].mean(axis=0), R.value[s, L - 1 - t].mean(axis=0)])
        return out


MODEL_CLASSES = {"irt": DpIrt, "nmf": DpNmf, "bidkt": DpBidkt}


def build_model(family: str, data: Dataset, dim: int, layers: int = 1, seed: int = 0, **hyper) -> DPModel:
    if family not in MODEL_CLASSES:
        raise ValueError(f"unknown model family {family!r}; choose from {FAMILIES}")
    return MODEL_CLASSES[family](data.num_users, data.options_per_item, dim, layers, seed, **hyper)
