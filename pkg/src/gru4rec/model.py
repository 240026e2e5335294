"""GRU layers, item embeddings and candidate scoring with hand-written gradients.

Conventions: a layer's gate-stacked weights are ``W`` (3H x in), ``U``
(3H x H) and ``b`` (3H), blocks ordered reset, update, candidate. Batches are
rows. The update is ``h' = (1 - z) * h + z * h_cand``.

Backpropagation is truncated at one step: gradients reach the parameters
used in the current step but never the previous hidden state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _faults

EMBEDDING_MODES = ("none", "separate", "shared")
SELU_ALPHA = 1.6732632423543772
SELU_SCALE = 1.0507009873554805


class ModelError(ValueError):
    pass


@dataclass
class SparseGrad:
    """Gradient for a subset of rows (``axis=0``) or columns (``axis=1``) of a matrix.

    Indices may repeat; repeated entries add up.
    """

    index: np.ndarray
    values: np.ndarray  # one row per index, always (len(index), width)
    axis: int = 0

    def dense(self, shape) -> np.ndarray:
        out = np.zeros(shape if self.axis == 0 else shape[::-1], dtype=self.values.dtype)
        np.add.at(out, self.index, self.values)
        return out if self.axis == 0 else out.T


@dataclass
class ModelParams:
    mode: str
    layers: list[int]
    W: list[np.ndarray]
    U: list[np.ndarray]
    b: list[np.ndarray]
    output_embedding: np.ndarray
    input_embedding: np.ndarray | None = None

    @property
    def n_items(self) -> int:
        return self.output_embedding.shape[0]

    @property
    def dtype(self):
        return self.output_embedding.dtype

    @property
    def output_name(self) -> str:
        return "item_embedding" if self.mode == "shared" else "output_embedding"

    @property
    def input_name(self) -> str:
        return {"none": "W0", "separate": "input_embedding", "shared": "item_embedding"}[self.mode]

    def named(self) -> dict[str, np.ndarray]:
        """Unique parameter tensors; the tied matrix appears once in shared mode."""
        out = {}
        if self.mode == "separate":
            out["input_embedding"] = self.input_embedding
        for i, (W, U, b) in enumerate(zip(self.W, self.U, self.b)):
            out[f"W{i}"], out[f"U{i}"], out[f"b{i}"] = W, U, b
        out[self.output_name] = self.output_embedding
        return out

    def copy(self) -> "ModelParams":
        out = ModelParams(
            self.mode,
            list(self.layers),
            [w.copy() for w in self.W],
            [u.copy() for u in self.U],
            [b.copy() for b in self.b],
            self.output_embedding.copy(),
        )
        if self.mode == "shared":
            out.input_embedding = out.output_embedding
        elif self.input_embedding is not None:
            out.input_embedding = self.input_embedding.copy()
        return out

    def zero_state(self, batch_size: int) -> list[np.ndarray]:
        return [np.zeros((batch_size, h), dtype=self.dtype) for h in self.layers]


def glorot_uniform(shape, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    fan_out, fan_in = shape[0], shape[1]
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _gate_stack(h: int, n_in: int, rng, dtype) -> np.ndarray:
    # each gate block gets its own Glorot bound
    return np.concatenate([glorot_uniform((h, n_in), rng, dtype) for _ in range(3)])


def init_model(
    n_items: int,
    layers,
    embedding_mode: str = "shared",
    embedding_dim: int = 0,
    rng: np.random.Generator | None = None,
    dtype=np.float32,
) -> ModelParams:
    """Glorot-uniform weights, zero biases.

    ``embedding_dim`` is only read in separate mode; shared mode ties the
    input embedding to the V x H_top scoring matrix.
    """
    rng = np.random.default_rng() if rng is None else rng
    layers = [int(h) for h in layers]
    if not layers or min(layers) < 1 or n_items < 1:
        raise ModelError("layer sizes and n_items must be positive")
    if embedding_mode not in EMBEDDING_MODES:
        raise ModelError(f"unknown embedding mode {embedding_mode!r}")
    if embedding_mode == "shared" and embedding_dim not in (0, layers[-1]):
        raise ModelError(f"shared embedding needs embedding_dim == {layers[-1]} (got {embedding_dim})")
    if embedding_mode == "separate" and embedding_dim < 1:
        raise ModelError("separate embedding needs a positive embedding_dim")
    in_dim = {"none": n_items, "separate": embedding_dim, "shared": layers[-1]}[embedding_mode]
    input_embedding = None
    if embedding_mode == "separate":
        input_embedding = glorot_uniform((n_items, embedding_dim), rng, dtype)
    W, U, b = [], [], []
    for h in layers:
        W.append(_gate_stack(h, in_dim, rng, dtype))
        U.append(_gate_stack(h, h, rng, dtype))
        b.append(np.zeros(3 * h, dtype=dtype))
        in_dim = h
    output_embedding = glorot_uniform((n_items, layers[-1]), rng, dtype)
    if embedding_mode == "shared":
        input_embedding = output_embedding
    return ModelParams(embedding_mode, layers, W, U, b, output_embedding, input_embedding)


# ---------------------------------------------------------------------------
# activations


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def parse_final_act(kind: str) -> tuple[str, float]:
    """``"elu-0.5"`` -> ``("elu", 0.5)``; plain names get parameter 1."""
    name, _, arg = kind.partition("-")
    if name not in ("softmax", "linear", "relu", "elu", "selu"):
        raise ModelError(f"unknown final activation {kind!r}")
    if arg and name != "elu":
        raise ModelError(f"{name} takes no parameter")
    return name, float(arg) if arg else 1.0


def final_activation(scores: np.ndarray, kind: str) -> np.ndarray:
    name, alpha = parse_final_act(kind)
    if name == "softmax":
        return softmax(scores, axis=1)
    if name == "linear":
        return scores
    if name == "relu":
        return np.maximum(scores, 0)
    if name == "elu":
        return np.where(scores > 0, scores, alpha * np.expm1(np.minimum(scores, 0)))
    return SELU_SCALE * np.where(scores > 0, scores, SELU_ALPHA * np.expm1(np.minimum(scores, 0)))


def final_activation_grad(scores: np.ndarray, grad_out: np.ndarray, kind: str) -> np.ndarray:
    """Chain ``grad_out`` through an elementwise final activation."""
    name, alpha = parse_final_act(kind)
    if name == "linear":
        return grad_out
    if name == "relu":
        return grad_out * (scores > 0)
    if name == "elu":
        return grad_out * np.where(scores > 0, 1.0, alpha * np.exp(np.minimum(scores, 0)))
    if name == "selu":
        return grad_out * SELU_SCALE * np.where(scores > 0, 1.0, SELU_ALPHA * np.exp(np.minimum(scores, 0)))
    raise ModelError("softmax is fused into the cross-entropy loss")


def apply_dropout(x: np.ndarray, p: float, rng: np.random.Generator | None, train: bool = True):
    """Inverted dropout; ``p`` is the probability of dropping an entry.

    Returns ``(output, scale)`` where ``scale`` is the multiplier applied to
    each entry (``None`` when nothing was dropped).
    """
    if not 0 <= p < 1:
        raise ModelError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0:
        return x, None
    if _faults.active("dropout_keep_probability"):
        p = 1.0 - p
    keep = rng.random(x.shape) >= p
    scale = keep.astype(x.dtype) / x.dtype.type(1.0 - p)
    return x * scale, scale


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardCache:
    inputs: np.ndarray
    candidates: np.ndarray | None
    embed_scale: np.ndarray | None
    x: list = field(default_factory=list)  # layer inputs after dropout (None for one-hot)
    h_prev: list = field(default_factory=list)
    r: list = field(default_factory=list)
    z: list = field(default_factory=list)
    cand: list = field(default_factory=list)
    out_scale: list = field(default_factory=list)
    output: np.ndarray | None = None
    score_rows: np.ndarray | None = None
    score_evaluations: int = 0


def gru_layer(W, U, b, x_proj, h):
    """One GRU step given the precomputed input projection ``x @ W.T + b``."""
    H = h.shape[1]
    rz = sigmoid(x_proj[:, : 2 * H] + h @ U[: 2 * H].T)
    r, z = rz[:, :H], rz[:, H:]
    cand = np.tanh(x_proj[:, 2 * H :] + (r * h) @ U[2 * H :].T)
    h_new = h + z * (cand - h)
    return h_new, r, z, cand


def embed(params: ModelParams, inputs: np.ndarray) -> np.ndarray | None:
    if params.mode == "none":
        return None
    return params.input_embedding[inputs]


def step(
    params: ModelParams,
    state: list[np.ndarray],
    inputs: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
    dropout_p_embed: float = 0.0,
    dropout_p_hidden: float = 0.0,
    keep_cache: bool = False,
):
    """Advance the recurrent state by one item per row.

    Returns ``(top_output, new_state, cache)``. ``top_output`` is the last
    layer's output after hidden dropout; the returned state holds the
    undropped activations. ``state`` rows must already be reset.
    """
    cache = ForwardCache(inputs, None, None) if keep_cache else None
    x = embed(params, inputs)
    if x is not None:
        x, scale = apply_dropout(x, dropout_p_embed, rng, train)
        if cache is not None:
            cache.embed_scale = scale
    new_state = []
    for i, (W, U, b) in enumerate(zip(params.W, params.U, params.b)):
        h = state[i]
        proj = (W[:, inputs].T + b) if x is None else (x @ W.T + b)
        h_new, r, z, cand = gru_layer(W, U, b, proj, h)
        new_state.append(h_new)
        out, scale = apply_dropout(h_new, dropout_p_hidden, rng, train)
        if cache is not None:
            cache.x.append(x)
            cache.h_prev.append(h)
            cache.r.append(r)
            cache.z.append(z)
            cache.cand.append(cand)
            cache.out_scale.append(scale)
        x = out
    if cache is not None:
        cache.output = x
    return x, new_state, cache


def score(params: ModelParams, output: np.ndarray, candidates: np.ndarray, cache: ForwardCache | None = None):
    """Dot-product scores of each row against the candidate items' output embeddings."""
    candidates = np.asarray(candidates)
    if candidates.size and (candidates.max() >= params.n_items or candidates.min() < 0):
        raise ModelError("candidate index out of range")
    if _faults.active("sample_after_scoring"):
        full = output @ params.output_embedding.T
        scores = full[:, candidates]
        rows = params.output_embedding[candidates]
        evaluated = full.size
    else:
        rows = params.output_embedding[candidates]
        scores = output @ rows.T
        evaluated = scores.size
    if cache is not None:
        cache.candidates = candidates
        cache.score_rows = rows
        cache.score_evaluations = evaluated
    return scores


def score_all(params: ModelParams, output: np.ndarray) -> np.ndarray:
    return output @ params.output_embedding.T


def forward(
    params: ModelParams,
    state: list[np.ndarray],
    inputs: np.ndarray,
    candidates: np.ndarray,
    train: bool = False,
    rng: np.random.Generator | None = None,
    dropout_p_embed: float = 0.0,
    dropout_p_hidden: float = 0.0,
):
    """One training/scoring step: returns ``(scores, new_state, cache)``."""
    out, new_state, cache = step(
        params, state, inputs, train, rng, dropout_p_embed, dropout_p_hidden, keep_cache=True
    )
    scores = score(params, out, candidates, cache)
    return scores, new_state, cache


def backward(params: ModelParams, cache: ForwardCache | None, dscores: np.ndarray) -> dict:
    """Gradients of the step loss given ``dscores = dLoss/dscores``.

    Embedding gradients are :class:`SparseGrad` over touched rows only; in
    shared mode input- and output-side rows are concatenated into one entry.
    """
    if cache is None or cache.output is None or cache.candidates is None:
        raise ModelError("backward needs the intermediates of a forward pass run with a cache")
    if _faults.active("backward_sign_flip"):
        dscores = -dscores
    grads: dict = {}
    out_rows = SparseGrad(cache.candidates, dscores.T @ cache.output)
    d = dscores @ cache.score_rows
    for i in reversed(range(len(params.layers))):
        W, U = params.W[i], params.U[i]
        H = params.layers[i]
        if cache.out_scale[i] is not None:
            d = d * cache.out_scale[i]
        h, r, z, cand = cache.h_prev[i], cache.r[i], cache.z[i], cache.cand[i]
        dz = d * (cand - h)
        dcand = d * z * (1.0 - cand * cand)
        rh = r * h
        drh = dcand @ U[2 * H :]
        dr = drh * h
        da = np.concatenate([dr * r * (1.0 - r), dz * z * (1.0 - z), dcand], axis=1)
        dU = np.empty_like(U)
        dU[: 2 * H] = da[:, : 2 * H].T @ h
        dU[2 * H :] = dcand.T @ rh
        grads[f"U{i}"] = dU
        grads[f"b{i}"] = da.sum(axis=0)
        x = cache.x[i]
        if x is None:
            grads["W0"] = SparseGrad(cache.inputs, da, axis=1)
            d = None
        else:
            grads[f"W{i}"] = da.T @ x
            d = da @ W
    if params.mode == "none":
        grads[params.output_name] = out_rows
    else:
        if cache.embed_scale is not None:
            d = d * cache.embed_scale
        in_rows = SparseGrad(cache.inputs, d)
        if params.mode == "shared":
            grads["item_embedding"] = SparseGrad(
                np.concatenate([in_rows.index, out_rows.index]), np.concatenate([in_rows.values, out_rows.values])
            )
        else:
            grads["input_embedding"] = in_rows
            grads["output_embedding"] = out_rows
    return grads


def dense_grads(params: ModelParams, grads: dict) -> dict[str, np.ndarray]:
    named = params.named()
    return {k: (g.dense(named[k].shape) if isinstance(g, SparseGrad) else g) for k, g in grads.items()}


def reset_rows(state: list[np.ndarray], mask: np.ndarray) -> None:
    """Zero the hidden-state rows of slots that start a new session (in place)."""
    if mask.any():
        for h in state:
            h[mask] = 0


# ---------------------------------------------------------------------------
# reference path, kept deliberately naive


def dense_reference_scores(params: ModelParams, state, inputs, candidates) -> np.ndarray:
    """Same computation as :func:`forward` in evaluation mode, via explicit one-hot
    products, per-gate matrices and float64 loops over rows."""
    V = params.n_items
    rows = []
    for k, item in enumerate(inputs):
        onehot = np.zeros(V)
        onehot[item] = 1.0
        if params.mode == "none":
            x = onehot
        else:
            x = onehot @ params.input_embedding.astype(np.float64)
        for i, H in enumerate(params.layers):
            W = params.W[i].astype(np.float64)
            U = params.U[i].astype(np.float64)
            b = params.b[i].astype(np.float64)
            Wr, Wz, Wh = W[:H], W[H : 2 * H], W[2 * H :]
            Ur, Uz, Uh = U[:H], U[H : 2 * H], U[2 * H :]
            br, bz, bh = b[:H], b[H : 2 * H], b[2 * H :]
            h = np.asarray(state[i][k], dtype=np.float64)
            r = 1.0 / (1.0 + np.exp(-(Wr @ x + Ur @ h + br)))
            z = 1.0 / (1.0 + np.exp(-(Wz @ x + Uz @ h + bz)))
            hc = np.tanh(Wh @ x + Uh @ (r * h) + bh)
            x = (1.0 - z) * h + z * hc
        out = params.output_embedding.astype(np.float64)
        rows.append([float(x @ out[c]) for c in candidates])
    return np.array(rows)
