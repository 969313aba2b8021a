"""Small numpy neural-network core.

Two model families are supported:

* ``gru``: a single gated recurrent layer (update/reset/candidate gates)
  followed by a dense head applied to every hidden state. The head has one
  sigmoid neuron for packet probabilities.
* ``dense``: an optional tanh hidden layer followed by a dense head. Used for
  the selector's policy networks (softmax head) and for toy logistic models.

Weights live in one flat float64 vector so that aggregation, poisoning and
structural checks operate on plain arrays.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

INIT_SCALE = 0.1
PROB_EPS = 1e-7

CELLS = ("gru", "dense")


class DimensionError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, tensor: str):
        super().__init__(f"non-finite gradient in tensor {tensor!r}")
        self.tensor = tensor


@dataclass(frozen=True)
class ModelSpec:
    model_id: str
    input_dim: int
    cell: str = "gru"
    hidden_dim: int = 32
    output_dim: int = 1

    def __post_init__(self):
        if self.cell not in CELLS:
            raise ValueError(f"unknown cell {self.cell!r}")
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be >= 1")
        # dense nets may skip the hidden layer; a recurrent cell needs state
        min_hidden = 1 if self.cell == "gru" else 0
        if self.hidden_dim < min_hidden:
            raise ValueError(f"hidden_dim must be >= {min_hidden} for {self.cell}")

    def structure(self) -> Tuple:
        return (self.input_dim, self.cell, self.hidden_dim, self.output_dim)

    def same_structure(self, other: "ModelSpec") -> bool:
        return self.structure() == other.structure()

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "input_dim": self.input_dim,
            "cell": self.cell,
            "hidden_dim": self.hidden_dim,
            "output_dim": self.output_dim,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


def shape_map(spec: ModelSpec) -> List[Tuple[str, Tuple[int, ...]]]:
    F, H, O = spec.input_dim, spec.hidden_dim, spec.output_dim
    if spec.cell == "gru":
        shapes = []
        for g in ("z", "r", "n"):
            shapes += [(f"W_{g}", (H, F)), (f"U_{g}", (H, H)), (f"b_{g}", (H,))]
        return shapes + [("W_out", (O, H)), ("b_out", (O,))]
    if H == 0:
        return [("W_out", (O, F)), ("b_out", (O,))]
    return [("W_1", (H, F)), ("b_1", (H,)), ("W_out", (O, H)), ("b_out", (O,))]


def param_count(spec: ModelSpec) -> int:
    return int(sum(np.prod(shape) for _, shape in shape_map(spec)))


@dataclass(frozen=True, eq=False)
class ModelWeights:
    spec: ModelSpec
    params: np.ndarray

    def __post_init__(self):
        params = np.asarray(self.params, dtype=np.float64)
        if params.ndim != 1 or params.size != param_count(self.spec):
            raise DimensionError(
                f"{self.spec.model_id}: expected {param_count(self.spec)} params, got {params.size}"
            )
        object.__setattr__(self, "params", params)

    @property
    def shape_map(self):
        return shape_map(self.spec)

    def tensors(self) -> Dict[str, np.ndarray]:
        return unpack(self.spec, self.params)

    def replace(self, params: np.ndarray) -> "ModelWeights":
        return ModelWeights(self.spec, params)

    def __len__(self):
        return self.params.size


def unpack(spec: ModelSpec, flat: np.ndarray) -> Dict[str, np.ndarray]:
    out, offset = {}, 0
    for name, shape in shape_map(spec):
        size = int(np.prod(shape))
        out[name] = flat[offset:offset + size].reshape(shape)
        offset += size
    return out


def pack(spec: ModelSpec, tensors: Dict[str, np.ndarray]) -> np.ndarray:
    return np.concatenate([np.asarray(tensors[name]).ravel() for name, _ in shape_map(spec)])


def init_model(spec: ModelSpec, rng: np.random.Generator, scale: float = INIT_SCALE) -> ModelWeights:
    return ModelWeights(spec, rng.uniform(-scale, scale, size=param_count(spec)))


def zeros_like_spec(spec: ModelSpec) -> ModelWeights:
    return ModelWeights(spec, np.zeros(param_count(spec)))


@dataclass
class LabeledBatch:
    """Training examples for one model.

    For a recurrent model ``inputs`` has shape (B, T, F). ``labels`` is either
    (B,), supervising only the last step, or (B, T), supervising every step.
    Per-step labels are equivalent to feeding every prefix of every sequence
    as its own example. Dense models take (B, F) inputs and (B,) labels.
    """

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ValueError("inputs and labels differ in length")
        if not np.all((self.labels == 0) | (self.labels == 1)):
            raise ValueError("labels must be binary")

    def __len__(self):
        return self.inputs.shape[0]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_inputs(spec: ModelSpec, x: np.ndarray):
    want = 3 if spec.cell == "gru" else 2
    if x.ndim != want or x.shape[-1] != spec.input_dim:
        raise DimensionError(
            f"{spec.model_id}: expected {'(B, T, F)' if want == 3 else '(B, F)'} input with "
            f"F={spec.input_dim}, got shape {x.shape}"
        )


# ---------------------------------------------------------------- forward ---

def _gru_forward(t: Dict[str, np.ndarray], x: np.ndarray, keep_cache: bool):
    B, T, _ = x.shape
    H = t["U_z"].shape[0]
    h = np.zeros((B, H))
    # input projections for all steps at once
    xz = x @ t["W_z"].T + t["b_z"]
    xr = x @ t["W_r"].T + t["b_r"]
    xn = x @ t["W_n"].T + t["b_n"]
    hs = np.empty((B, T, H))
    cache = []
    for step in range(T):
        z = _sigmoid(xz[:, step] + h @ t["U_z"].T)
        r = _sigmoid(xr[:, step] + h @ t["U_r"].T)
        n = np.tanh(xn[:, step] + (r * h) @ t["U_n"].T)
        h_new = (1.0 - z) * n + z * h
        if keep_cache:
            cache.append((h, z, r, n))
        h = h_new
        hs[:, step] = h
    logits = hs @ t["W_out"].T + t["b_out"]
    return logits, (hs, cache)


def _dense_forward(t: Dict[str, np.ndarray], x: np.ndarray):
    if "W_1" in t:
        hidden = np.tanh(x @ t["W_1"].T + t["b_1"])
    else:
        hidden = x
    return hidden @ t["W_out"].T + t["b_out"], hidden


def logits(weights: ModelWeights, inputs: np.ndarray) -> np.ndarray:
    """Raw head outputs: (B, T, O) for gru, (B, O) for dense."""
    x = np.asarray(inputs, dtype=np.float64)
    _check_inputs(weights.spec, x)
    t = weights.tensors()
    if weights.spec.cell == "gru":
        return _gru_forward(t, x, keep_cache=False)[0]
    return _dense_forward(t, x)[0]


def forward_steps(weights: ModelWeights, inputs: np.ndarray) -> np.ndarray:
    """Sigmoid probability after every step of each sequence, shape (B, T)."""
    if weights.spec.cell != "gru":
        raise DimensionError("forward_steps needs a recurrent model")
    return _sigmoid(logits(weights, inputs)[..., 0])


def forward(weights: ModelWeights, sequence: np.ndarray) -> float:
    """Probability emitted for a single input.

    A (T, F) sequence for recurrent models, a (F,) vector for dense ones.
    """
    x = np.asarray(sequence, dtype=np.float64)[None]
    if weights.spec.output_dim != 1:
        raise DimensionError("forward expects a single-output model; use softmax_head")
    out = logits(weights, x)
    return float(_sigmoid(out[0, -1, 0] if weights.spec.cell == "gru" else out[0, 0]))


def predict_proba(weights: ModelWeights, inputs: np.ndarray) -> np.ndarray:
    """Batched probabilities matching the shape a LabeledBatch's labels would take."""
    out = logits(weights, inputs)
    return _sigmoid(out[..., 0])


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_head(weights: ModelWeights, features: np.ndarray) -> np.ndarray:
    if weights.spec.cell != "dense":
        raise DimensionError("softmax_head needs a dense model")
    x = np.asarray(features, dtype=np.float64)
    single = x.ndim == 1
    out = softmax(logits(weights, x[None] if single else x))
    return out[0] if single else out


# ------------------------------------------------------------------- loss ---

def _bce_terms(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))


def _head_probs(weights: ModelWeights, batch: LabeledBatch) -> np.ndarray:
    p = predict_proba(weights, batch.inputs)
    if weights.spec.cell == "gru" and batch.labels.ndim == 1:
        p = p[:, -1]
    return p


def loss(weights: ModelWeights, batch: LabeledBatch) -> float:
    """Mean binary cross-entropy over every supervised prediction."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    return float(np.mean(_bce_terms(_head_probs(weights, batch), batch.labels)))


# --------------------------------------------------------------- backward ---

def _gru_backward(t, x, cache, hs, dlogits):
    """BPTT for the gru model. ``dlogits`` has shape (B, T, O)."""
    B, T, _ = x.shape
    g = {k: np.zeros_like(v) for k, v in t.items()}
    g["W_out"] = np.einsum("bto,bth->oh", dlogits, hs)
    g["b_out"] = dlogits.sum(axis=(0, 1))
    dhs = dlogits @ t["W_out"]
    da_z = np.empty((B, T, t["U_z"].shape[0]))
    da_r = np.empty_like(da_z)
    da_n = np.empty_like(da_z)
    dh = np.zeros((B, t["U_z"].shape[0]))
    for step in reversed(range(T)):
        h_prev, z, r, n = cache[step]
        dh = dh + dhs[:, step]
        dz = dh * (h_prev - n)
        dn = dh * (1.0 - z)
        dh_prev = dh * z
        a_n = dn * (1.0 - n * n)
        d_rh = a_n @ t["U_n"]
        a_r = d_rh * h_prev * r * (1.0 - r)
        a_z = dz * z * (1.0 - z)
        g["U_n"] += a_n.T @ (r * h_prev)
        g["U_r"] += a_r.T @ h_prev
        g["U_z"] += a_z.T @ h_prev
        dh = dh_prev + d_rh * r + a_r @ t["U_r"] + a_z @ t["U_z"]
        da_z[:, step], da_r[:, step], da_n[:, step] = a_z, a_r, a_n
    for gate, da in (("z", da_z), ("r", da_r), ("n", da_n)):
        g[f"W_{gate}"] = np.einsum("bth,btf->hf", da, x)
        g[f"b_{gate}"] = da.sum(axis=(0, 1))
    return g


def _dense_backward(t, x, hidden, dlogits):
    g = {"W_out": dlogits.T @ hidden, "b_out": dlogits.sum(axis=0)}
    if "W_1" in t:
        dpre = (dlogits @ t["W_out"]) * (1.0 - hidden * hidden)
        g["W_1"] = dpre.T @ x
        g["b_1"] = dpre.sum(axis=0)
    return g


def backprop(weights: ModelWeights, inputs: np.ndarray, dlogits_fn) -> np.ndarray:
    """Gradient of a scalar objective with respect to the flat params.

    ``dlogits_fn(logits)`` returns dObjective/dlogits with the logits' shape.
    """
    spec = weights.spec
    x = np.asarray(inputs, dtype=np.float64)
    _check_inputs(spec, x)
    t = weights.tensors()
    if spec.cell == "gru":
        out, (hs, cache) = _gru_forward(t, x, keep_cache=True)
        grads = _gru_backward(t, x, cache, hs, dlogits_fn(out))
    else:
        out, hidden = _dense_forward(t, x)
        grads = _dense_backward(t, x, hidden, dlogits_fn(out))
    for name, arr in grads.items():
        if not np.all(np.isfinite(arr)):
            raise NonFiniteGradientError(name)
    return pack(spec, grads)


def loss_gradient(weights: ModelWeights, batch: LabeledBatch) -> np.ndarray:
    if len(batch) == 0:
        raise ValueError("empty batch")
    y = batch.labels
    last_only = weights.spec.cell == "gru" and y.ndim == 1

    def dlogits(out):
        z = out[..., 0]
        p = _sigmoid(z)
        p_used = p[:, -1] if last_only else p
        # clipping kills the gradient outside (eps, 1 - eps)
        live = (p_used > PROB_EPS) & (p_used < 1.0 - PROB_EPS)
        d = (p_used - y) * live / y.size
        full = np.zeros_like(out)
        if last_only:
            full[:, -1, 0] = d
        else:
            full[..., 0] = d
        return full

    return backprop(weights, batch.inputs, dlogits)


def gd_step(weights: ModelWeights, batch: LabeledBatch, lr: float) -> ModelWeights:
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if lr == 0:
        return weights.replace(weights.params.copy())
    grad = loss_gradient(weights, batch)
    return weights.replace(weights.params - lr * grad)


def train_local(weights: ModelWeights, batch: LabeledBatch, lr: float, iterations: int) -> ModelWeights:
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    for _ in range(iterations):
        weights = gd_step(weights, batch, lr)
    return weights


def numeric_gradient(objective, params: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of ``objective(params)``."""
    grad = np.empty_like(params)
    work = params.copy()
    for i in range(params.size):
        orig = work[i]
        work[i] = orig + h
        up = objective(work)
        work[i] = orig - h
        down = objective(work)
        work[i] = orig
        grad[i] = (up - down) / (2 * h)
    return grad


# ------------------------------------------------------------- export/io ---

def dump_weights(weights: ModelWeights) -> str:
    """Text export: JSON spec and shape-map header lines, then one value per line."""
    lines = ["# spec " + json.dumps(weights.spec.to_dict(), sort_keys=True)]
    lines += [f"# tensor {name} {' '.join(map(str, shape))}" for name, shape in weights.shape_map]
    lines += [repr(float(v)) for v in weights.params]
    return "\n".join(lines) + "\n"


def parse_weights(text: str) -> ModelWeights:
    spec, values = None, []
    for line in text.splitlines():
        if line.startswith("# spec "):
            spec = ModelSpec.from_dict(json.loads(line[len("# spec "):]))
        elif line.startswith("#") or not line.strip():
            continue
        else:
            values.append(float(line))
    if spec is None:
        raise ValueError("missing spec header")
    return ModelWeights(spec, np.array(values))


def to_bytes(weights: ModelWeights) -> bytes:
    header = json.dumps({"spec": weights.spec.to_dict(), "shapes": weights.shape_map}).encode()
    return len(header).to_bytes(4, "little") + header + weights.params.astype("<f8").tobytes()


def from_bytes(blob: bytes) -> ModelWeights:
    n = int.from_bytes(blob[:4], "little")
    header = json.loads(blob[4:4 + n])
    params = np.frombuffer(blob[4 + n:], dtype="<f8").copy()
    return ModelWeights(ModelSpec.from_dict(header["spec"]), params)


def stack_params(models: Sequence[ModelWeights]) -> np.ndarray:
    return np.stack([m.params for m in models])
