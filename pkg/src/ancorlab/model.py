"""Encoder/embedder/classifier model with a momentum-updated twin.

Architecture (desk scale): the encoder is a ReLU MLP d_in -> d -> d, the
embedder a ReLU MLP d -> d -> e whose output is L2-normalized at embed time.
A bias-free linear classifier maps a tap point to the R class logits. The tap
depends on the variant:

  * "seq"  -- classifier reads the normalized embedding (W is R x e);
  * "fork" -- classifier reads the embedder's first-layer output (W is R x d;
    post-ReLU by default, pre-ReLU behind ``fork_preactivation``);
  * the baseline trainers may also tap the raw encoder output directly
    (W is R x d, tap "encoder").

The momentum twin (encoder + embedder) starts as an exact copy of the online
parameters and is dragged toward them by ``momentum_update``; it produces the
contrastive keys and never receives gradient.

Checkpoints are a flat binary container: magic "ANCR", u32 LE version, u32
array count, then per array a u16 name length, the UTF-8 name, u32 ndim, u32
dims, and the float64 LE values. Round-trips are bit-exact.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataFormatError, DimensionError
from .numcore import as_array, check_finite
from .rng import substream

VARIANTS = ("seq", "fork")
TAPS = ("embed", "hidden", "encoder")

CHECKPOINT_MAGIC = b"ANCR"
CHECKPOINT_VERSION = 1


class CheckpointMagicError(DataFormatError):
    pass


class CheckpointVersionError(DataFormatError):
    pass


class CheckpointTruncatedError(DataFormatError):
    pass


class CheckpointShapeError(DataFormatError):
    pass


# ---------------------------------------------------------------------------
# MLP forward / backward
# ---------------------------------------------------------------------------


@dataclass
class MlpParams:
    """Stacked fully connected layers; ReLU between layers, none after last.

    weights[i] is (out_i, in_i) and biases[i] is (1, out_i); consecutive
    dimensions chain.
    """

    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        for i in range(len(self.weights) - 1):
            if self.weights[i + 1].shape[1] != self.weights[i].shape[0]:
                raise DimensionError(
                    f"layer {i} out dim {self.weights[i].shape[0]} != "
                    f"layer {i + 1} in dim {self.weights[i + 1].shape[1]}"
                )
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (1, w.shape[0]):
                raise DimensionError(f"layer {i} bias shape {b.shape} != (1, {w.shape[0]})")

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class MlpCache:
    activations: list[np.ndarray]  # a_0 = input, ..., a_L = output
    preacts: list[np.ndarray]      # z_1, ..., z_L


def mlp_forward(params: MlpParams, X: np.ndarray) -> tuple[np.ndarray, MlpCache]:
    """Forward a batch X (n, in_dim); returns (output (n, out_dim), cache)."""
    X = as_array(X, 2)
    if X.shape[1] != params.in_dim:
        raise DimensionError(f"input dim {X.shape[1]} != expected {params.in_dim}")
    acts = [X]
    preacts = []
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = acts[-1] @ w.T + b
        preacts.append(z)
        acts.append(np.maximum(z, 0.0) if i < last else z)
    check_finite(acts[-1], "mlp output")
    return acts[-1], MlpCache(acts, preacts)


def mlp_backward(
    params: MlpParams,
    cache: MlpCache,
    d_out: np.ndarray,
    inject_post: dict[int, np.ndarray] | None = None,
    inject_pre: dict[int, np.ndarray] | None = None,
) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Backward pass; returns (d_input, d_weights, d_biases).

    inject_post[i] adds an extra gradient at layer i's post-activation output
    (used when a classifier taps an intermediate layer); inject_pre[i] adds it
    before the ReLU instead.
    """
    last = len(params.weights) - 1
    g = as_array(d_out, 2)
    d_ws: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    d_bs: list[np.ndarray] = [None] * len(params.weights)  # type: ignore[list-item]
    for i in range(last, -1, -1):
        if inject_post and i in inject_post:
            g = g + inject_post[i]
        if i < last:
            g = g * (cache.preacts[i] > 0)
        if inject_pre and i in inject_pre:
            g = g + inject_pre[i]
        d_ws[i] = g.T @ cache.activations[i]
        d_bs[i] = g.sum(axis=0, keepdims=True)
        g = g @ params.weights[i]
    return g, d_ws, d_bs


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class AncorModel:
    encoder: MlpParams
    embedder: MlpParams
    classifier_w: np.ndarray  # (R, tap_dim), no bias
    variant: str              # "seq" | "fork"
    tap: str                  # "embed" | "hidden" | "encoder"
    momentum_encoder: MlpParams = field(repr=False, default=None)  # type: ignore[assignment]
    momentum_embedder: MlpParams = field(repr=False, default=None)  # type: ignore[assignment]
    fork_preactivation: bool = False

    @property
    def d_in(self) -> int:
        return self.encoder.in_dim

    @property
    def d(self) -> int:
        return self.encoder.out_dim

    @property
    def e(self) -> int:
        return self.embedder.out_dim

    @property
    def n_classes(self) -> int:
        return self.classifier_w.shape[0]

    def param_items(self, momentum: bool = False) -> list[tuple[str, np.ndarray]]:
        """Ordered (name, array) pairs; the order fixes the checkpoint layout."""
        items: list[tuple[str, np.ndarray]] = []
        prefix = "momentum." if momentum else ""
        enc = self.momentum_encoder if momentum else self.encoder
        emb = self.momentum_embedder if momentum else self.embedder
        for i, (w, b) in enumerate(zip(enc.weights, enc.biases)):
            items.append((f"{prefix}encoder.{i}.w", w))
            items.append((f"{prefix}encoder.{i}.b", b))
        for i, (w, b) in enumerate(zip(emb.weights, emb.biases)):
            items.append((f"{prefix}embedder.{i}.w", w))
            items.append((f"{prefix}embedder.{i}.b", b))
        if not momentum:
            items.append(("classifier.W", self.classifier_w))
        return items

    def online_params(self) -> list[tuple[str, np.ndarray]]:
        return self.param_items(momentum=False)


def tap_dim(tap: str, d: int, e: int) -> int:
    if tap == "embed":
        return e
    if tap in ("hidden", "encoder"):
        return d
    raise ValueError(f"unknown tap {tap!r}")


def _he_mlp(rng: np.random.Generator, dims: list[int]) -> MlpParams:
    weights, biases = [], []
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        std = np.sqrt(2.0 / d_in)
        weights.append(rng.standard_normal((d_out, d_in)) * std)
        biases.append(np.zeros((1, d_out)))
    return MlpParams(weights, biases)


def init_model(
    d_in: int,
    d: int,
    e: int,
    n_classes: int,
    variant: str = "seq",
    rng_seed: int = 0,
    tap: str | None = None,
    fork_preactivation: bool = False,
) -> AncorModel:
    """He-normal weights, zero biases; momentum twins start as exact copies."""
    if min(d_in, d, e, n_classes) < 1:
        raise DimensionError("all dimensions must be >= 1")
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    if tap is None:
        tap = "embed" if variant == "seq" else "hidden"
    if tap not in TAPS:
        raise ValueError(f"unknown tap {tap!r}")
    if variant == "seq" and tap == "hidden":
        raise ValueError("seq variant does not tap the embedder hidden layer")
    rng = substream(rng_seed, "init")
    encoder = _he_mlp(rng, [d_in, d, d])
    embedder = _he_mlp(rng, [d, d, e])
    cols = tap_dim(tap, d, e)
    classifier_w = rng.standard_normal((n_classes, cols)) * np.sqrt(2.0 / cols)
    return AncorModel(
        encoder=encoder,
        embedder=embedder,
        classifier_w=classifier_w,
        variant=variant,
        tap=tap,
        momentum_encoder=encoder.copy(),
        momentum_embedder=embedder.copy(),
        fork_preactivation=fork_preactivation,
    )


# ---------------------------------------------------------------------------
# Forward paths
# ---------------------------------------------------------------------------


@dataclass
class EmbedCache:
    """Intermediates of the online embedding path, kept for backprop."""

    encoder: MlpCache
    embedder: MlpCache
    raw: np.ndarray     # (n, e) pre-normalization embedder output
    unit: np.ndarray    # (n, e) normalized embeddings
    norms: np.ndarray   # (n,)


def embed_batch(model: AncorModel, X: np.ndarray, momentum: bool = False) -> tuple[np.ndarray, EmbedCache]:
    """Full embedding path on a batch: encoder -> embedder -> row L2 norm."""
    from .numcore import l2_normalize_rows

    enc = model.momentum_encoder if momentum else model.encoder
    emb = model.momentum_embedder if momentum else model.embedder
    feats, enc_cache = mlp_forward(enc, X)
    raw, emb_cache = mlp_forward(emb, feats)
    unit, norms = l2_normalize_rows(raw)
    return unit, EmbedCache(enc_cache, emb_cache, raw, unit, norms)


def embed_query(model: AncorModel, x: np.ndarray) -> np.ndarray:
    """q = normalize(E(B(x))) for a single d_in vector; unit norm."""
    unit, _ = embed_batch(model, as_array(x, 1)[None, :], momentum=False)
    return unit[0]


def embed_key(model: AncorModel, x: np.ndarray) -> np.ndarray:
    """Key embedding through the momentum twins; same contract as embed_query."""
    unit, _ = embed_batch(model, as_array(x, 1)[None, :], momentum=True)
    return unit[0]


def classify_logits(model: AncorModel, z: np.ndarray) -> np.ndarray:
    """Bias-free logits W @ z for a single tap-point vector."""
    z = as_array(z, 1)
    if z.shape[0] != model.classifier_w.shape[1]:
        raise DimensionError(
            f"classifier for variant {model.variant!r} (tap {model.tap!r}) expects "
            f"dim {model.classifier_w.shape[1]}, got {z.shape[0]}"
        )
    return model.classifier_w @ z


def tap_output(model: AncorModel, cache: EmbedCache) -> np.ndarray:
    """Classifier input rows for the model's tap, given an online embed cache."""
    if model.tap == "embed":
        return cache.unit
    if model.tap == "hidden":
        z1 = cache.embedder.preacts[0]
        return z1 if model.fork_preactivation else cache.embedder.activations[1]
    return cache.encoder.activations[-1]


def forward_logits(model: AncorModel, X: np.ndarray) -> np.ndarray:
    """Batch logits through the model's own tap point (n, R)."""
    _, cache = embed_batch(model, X, momentum=False)
    return tap_output(model, cache) @ model.classifier_w.T


def momentum_update(model: AncorModel, m: float) -> None:
    """theta_k <- m * theta_k + (1 - m) * theta_q over encoder and embedder."""
    if not 0.0 <= m <= 1.0:
        raise ValueError(f"momentum coefficient {m} outside [0, 1]")
    for online, twin in (
        (model.encoder, model.momentum_encoder),
        (model.embedder, model.momentum_embedder),
    ):
        for w_q, w_k in zip(online.weights, twin.weights):
            w_k *= m
            w_k += (1.0 - m) * w_q
        for b_q, b_k in zip(online.biases, twin.biases):
            b_k *= m
            b_k += (1.0 - m) * b_q


# ---------------------------------------------------------------------------
# Checkpoint container
# ---------------------------------------------------------------------------

_VARIANT_CODE = {"seq": 0, "fork": 1}
_TAP_CODE = {"embed": 0, "hidden": 1, "encoder": 2}


def write_arrays(path, items: list[tuple[str, np.ndarray]]) -> None:
    """Write named float64 arrays in the checkpoint container format."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(items))]
    for name, arr in items:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_arrays(path) -> list[tuple[str, np.ndarray]]:
    """Read a checkpoint container; raises distinct errors per failure mode."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4 or buf[:4] != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"bad magic bytes in {path}")
    if len(buf) < 12:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    version, count = struct.unpack_from("<II", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: version {version}, expected {CHECKPOINT_VERSION}")
    off = 12
    items: list[tuple[str, np.ndarray]] = []
    for idx in range(count):
        name = None
        try:
            (name_len,) = struct.unpack_from("<H", buf, off)
            off += 2
            if len(buf) < off + name_len:
                raise struct.error("name out of bounds")
            name = buf[off : off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<I", buf, off)
            off += 4
            if not 1 <= ndim <= 4:
                raise CheckpointShapeError(f"array '{name}' has implausible ndim {ndim}")
            dims = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
        except struct.error:
            label = name if name is not None else f"array #{idx}"
            raise CheckpointTruncatedError(f"{path}: truncated while reading header of {label}") from None
        n_values = int(np.prod(dims, dtype=np.int64))
        end = off + 8 * n_values
        if end > len(buf):
            raise CheckpointTruncatedError(f"{path}: truncated mid-array '{name}'")
        arr = np.frombuffer(buf[off:end], dtype="<f8").reshape(dims).astype(np.float64)
        items.append((name, arr))
        off = end
    return items


def save_checkpoint(model: AncorModel, path) -> None:
    items = model.param_items(momentum=False) + model.param_items(momentum=True)
    arch = np.array(
        [[
            _VARIANT_CODE[model.variant],
            _TAP_CODE[model.tap],
            1.0 if model.fork_preactivation else 0.0,
        ]]
    )
    items.append(("meta.arch", arch))
    write_arrays(path, items)


def _collect_mlp(arrays: dict[str, np.ndarray], prefix: str) -> MlpParams:
    weights, biases = [], []
    i = 0
    while f"{prefix}.{i}.w" in arrays:
        weights.append(arrays[f"{prefix}.{i}.w"])
        if f"{prefix}.{i}.b" not in arrays:
            raise CheckpointShapeError(f"missing array '{prefix}.{i}.b'")
        biases.append(arrays[f"{prefix}.{i}.b"])
        i += 1
    if not weights:
        raise CheckpointShapeError(f"missing arrays for '{prefix}'")
    try:
        return MlpParams(weights, biases)
    except DimensionError as exc:
        raise CheckpointShapeError(f"{prefix}: {exc}") from None


def load_checkpoint(path) -> AncorModel:
    arrays = dict(read_arrays(path))
    if "meta.arch" not in arrays or arrays["meta.arch"].shape != (1, 3):
        raise CheckpointShapeError("missing or malformed 'meta.arch'")
    v_code, t_code, fork_pre = arrays["meta.arch"][0]
    variant = {c: n for n, c in _VARIANT_CODE.items()}.get(int(v_code))
    tap = {c: n for n, c in _TAP_CODE.items()}.get(int(t_code))
    if variant is None or tap is None:
        raise CheckpointShapeError("unknown variant/tap code in 'meta.arch'")
    encoder = _collect_mlp(arrays, "encoder")
    embedder = _collect_mlp(arrays, "embedder")
    m_encoder = _collect_mlp(arrays, "momentum.encoder")
    m_embedder = _collect_mlp(arrays, "momentum.embedder")
    if "classifier.W" not in arrays:
        raise CheckpointShapeError("missing array 'classifier.W'")
    W = arrays["classifier.W"]
    if embedder.in_dim != encoder.out_dim:
        raise CheckpointShapeError("embedder input dim does not match encoder output dim")
    expected_cols = tap_dim(tap, encoder.out_dim, embedder.out_dim)
    if W.ndim != 2 or W.shape[1] != expected_cols:
        raise CheckpointShapeError(
            f"classifier.W shape {W.shape} does not match tap {tap!r} dim {expected_cols}"
        )
    for online, twin, label in (
        (encoder, m_encoder, "momentum.encoder"),
        (embedder, m_embedder, "momentum.embedder"),
    ):
        for i, (w_q, w_k) in enumerate(zip(online.weights, twin.weights)):
            if w_q.shape != w_k.shape or len(online.weights) != len(twin.weights):
                raise CheckpointShapeError(f"momentum twin shape mismatch at '{label}.{i}.w'")
    return AncorModel(
        encoder=encoder,
        embedder=embedder,
        classifier_w=W,
        variant=variant,
        tap=tap,
        momentum_encoder=m_encoder,
        momentum_embedder=m_embedder,
        fork_preactivation=bool(fork_pre),
    )
