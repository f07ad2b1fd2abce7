"""Small neural toolkit: MLPs with hand-written backprop, diagonal-Gaussian
heads, analytic Gaussian KL, and Adam.

No autodiff framework. Parameters are plain lists of float64 arrays in the
order [W0, b0, W1, b1, ...]; every backward pass is checked against central
finite differences in the test suite.
"""

import json

import numpy as np
from dataclasses import dataclass, field

from .errors import InputValidationError

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0

ACTIVATIONS = ("tanh", "elu")
INITS = ("orthogonal", "small_uniform")


@dataclass(frozen=True)
class MlpSpec:
    """Shape and initialization recipe for one MLP.

    layer_sizes includes input and output: (in, hidden..., out).
    """

    layer_sizes: tuple
    activation: str = "tanh"
    init: str = "orthogonal"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes",
                           tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2:
            raise InputValidationError("MlpSpec needs at least input and "
                                       "output sizes")
        if any(s <= 0 for s in self.layer_sizes):
            raise InputValidationError(f"layer sizes must be positive, got "
                                       f"{self.layer_sizes}")
        if self.activation not in ACTIVATIONS:
            raise InputValidationError(f"unknown activation "
                                       f"{self.activation!r}")
        if self.init not in INITS:
            raise InputValidationError(f"unknown init {self.init!r}")

    @property
    def in_dim(self):
        return self.layer_sizes[0]

    @property
    def out_dim(self):
        return self.layer_sizes[-1]

    @property
    def n_layers(self):
        return len(self.layer_sizes) - 1

    def to_dict(self):
        return {"layer_sizes": list(self.layer_sizes),
                "activation": self.activation, "init": self.init,
                "seed": self.seed}

    @staticmethod
    def from_dict(d) -> "MlpSpec":
        return MlpSpec(tuple(d["layer_sizes"]), d["activation"], d["init"],
                       int(d["seed"]))


def _orthogonal(rng, rows, cols, gain):
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    qm, r = np.linalg.qr(a)
    qm = qm * np.sign(np.diag(r))   # fix the sign ambiguity of QR
    if rows < cols:
        qm = qm.T
    return gain * qm[:rows, :cols]


def mlp_init(spec: MlpSpec) -> list:
    """Fresh parameter list [W0, b0, ...] for the given spec."""
    rng = np.random.default_rng(spec.seed)
    params = []
    sizes = spec.layer_sizes
    for i in range(spec.n_layers):
        fan_in, fan_out = sizes[i], sizes[i + 1]
        if spec.init == "orthogonal":
            gain = np.sqrt(2.0) if i < spec.n_layers - 1 else 1.0
            w = _orthogonal(rng, fan_out, fan_in, gain)
        else:
            w = rng.uniform(-0.05, 0.05, size=(fan_out, fan_in))
        params.append(np.asarray(w, dtype=np.float64))
        params.append(np.zeros(fan_out))
    return params


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    return np.where(z > 0.0, z, np.expm1(z))


def _dact_from_h(name, h):
    # both activations admit a derivative written in the post-activation value
    if name == "tanh":
        return 1.0 - h * h
    return np.where(h > 0.0, 1.0, h + 1.0)


def mlp_forward(params, spec: MlpSpec, x):
    """Run the net. Returns (output, cache); feed cache to mlp_backward.

    x may be a single vector or a (batch, in_dim) matrix.
    """
    x = np.asarray(x, dtype=np.float64)
    one_d = x.ndim == 1
    if one_d:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.in_dim:
        raise InputValidationError(f"input shape {x.shape} does not match "
                                   f"spec input dim {spec.in_dim}")
    if len(params) != 2 * spec.n_layers:
        raise InputValidationError("parameter list does not match spec")
    inputs = []
    h = x
    for i in range(spec.n_layers):
        inputs.append(h)
        z = h @ params[2 * i].T + params[2 * i + 1]
        h = _act(spec.activation, z) if i < spec.n_layers - 1 else z
    cache = {"inputs": inputs, "one_d": one_d}
    return (h[0] if one_d else h), cache


def mlp_backward(params, spec: MlpSpec, cache, output_grad):
    """Backprop output_grad through the cached forward pass.

    Returns (param_grads, input_grad). param_grads matches the layout of
    params; input_grad has the shape of the forward input.
    """
    g = np.asarray(output_grad, dtype=np.float64)
    if cache["one_d"]:
        g = g[None, :]
    inputs = cache["inputs"]
    grads = [None] * len(params)
    for i in reversed(range(spec.n_layers)):
        grads[2 * i] = g.T @ inputs[i]
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ params[2 * i]
        if i > 0:
            g = g * _dact_from_h(spec.activation, inputs[i])
    return grads, (g[0] if cache["one_d"] else g)


# ---------------------------------------------------------------------------
# Diagonal Gaussian heads
# ---------------------------------------------------------------------------

def clamp_log_std(log_std):
    return np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)


@dataclass
class GaussianHead:
    """mean plus clamped log_std; state_dependent records how log_std was
    produced (per-input head vs a single learned vector)."""

    mean: np.ndarray
    log_std: np.ndarray
    state_dependent: bool = True

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_std = clamp_log_std(
            np.asarray(self.log_std, dtype=np.float64))

    @property
    def std(self):
        return np.exp(self.log_std)


def sample_reparam(head: GaussianHead, rng):
    """Pathwise sample: returns (sample, noise) with sample = mean + std*noise.

    Keeping the noise makes the exact gradient replayable later.
    """
    noise = rng.standard_normal(head.mean.shape)
    return head.mean + np.exp(head.log_std) * noise, noise


def gauss_log_prob(mean, log_std, x):
    """Log density of a diagonal Gaussian, summed over the last axis."""
    mean = np.asarray(mean, dtype=np.float64)
    log_std = np.asarray(log_std, dtype=np.float64)
    z = (np.asarray(x, dtype=np.float64) - mean) * np.exp(-log_std)
    return (-0.5 * np.sum(z * z, axis=-1)
            - np.sum(log_std + 0.5 * np.log(2.0 * np.pi), axis=-1))


def gauss_entropy(log_std):
    log_std = np.asarray(log_std, dtype=np.float64)
    return np.sum(log_std + 0.5 * (1.0 + np.log(2.0 * np.pi)), axis=-1)


def kl_diag_gauss(mu1, sigma1, mu2, sigma2):
    """KL(N(mu1, diag sigma1^2) || N(mu2, diag sigma2^2)) in nats.

    Summed over the last axis; scalar for vector inputs. Raises on
    non-positive standard deviations.
    """
    mu1 = np.asarray(mu1, dtype=np.float64)
    mu2 = np.asarray(mu2, dtype=np.float64)
    s1 = np.asarray(sigma1, dtype=np.float64)
    s2 = np.asarray(sigma2, dtype=np.float64)
    if np.any(s1 <= 0.0) or np.any(s2 <= 0.0):
        raise InputValidationError("kl_diag_gauss needs positive stds")
    out = np.sum(np.log(s2 / s1) + (s1 * s1 + (mu1 - mu2) ** 2)
                 / (2.0 * s2 * s2) - 0.5, axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def kl_diag_gauss_grads(mu1, sigma1, mu2, sigma2):
    """Per-element gradients of kl_diag_gauss wrt all four arguments."""
    mu1 = np.asarray(mu1, dtype=np.float64)
    mu2 = np.asarray(mu2, dtype=np.float64)
    s1 = np.asarray(sigma1, dtype=np.float64)
    s2 = np.asarray(sigma2, dtype=np.float64)
    inv_v2 = 1.0 / (s2 * s2)
    d_mu1 = (mu1 - mu2) * inv_v2
    d_s1 = -1.0 / s1 + s1 * inv_v2
    d_mu2 = -d_mu1
    d_s2 = 1.0 / s2 - (s1 * s1 + (mu1 - mu2) ** 2) * inv_v2 / s2
    return d_mu1, d_s1, d_mu2, d_s2


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0


def adam_init(params) -> AdamState:
    return AdamState(m=[np.zeros_like(p) for p in params],
                     v=[np.zeros_like(p) for p in params], t=0)


def adam_step(params, grads, state: AdamState, lr=3e-4, beta1=0.9,
              beta2=0.999, eps=1e-8):
    """One in-place Adam update with bias correction."""
    if len(grads) != len(params):
        raise InputValidationError("grads do not match params")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


def clip_global_norm(grads, max_norm):
    """Scale grads in place so the global L2 norm is at most max_norm."""
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0.0 and total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


def zeros_like_params(params):
    return [np.zeros_like(p) for p in params]


def add_scaled(acc, grads, scale=1.0):
    for a, g in zip(acc, grads):
        a += scale * g
    return acc


# ---------------------------------------------------------------------------
# Checkpoints: one JSON header line, then raw array bytes in header order.
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_arrays(path, kind: str, arrays: dict, meta: dict | None = None):
    header = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "meta": meta or {},
        "arrays": [{"name": name, "dtype": str(a.dtype),
                    "shape": list(a.shape)} for name, a in arrays.items()],
    }
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        f.write(b"\n")
        for a in arrays.values():
            f.write(np.ascontiguousarray(a).tobytes())


def load_arrays(path):
    """Returns (kind, arrays, meta). Bit-exact inverse of save_arrays."""
    with open(path, "rb") as f:
        header = json.loads(f.readline().decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise InputValidationError(
                f"unsupported checkpoint version "
                f"{header.get('format_version')!r} in {path}")
        arrays = {}
        for rec in header["arrays"]:
            dt = np.dtype(rec["dtype"])
            shape = tuple(rec["shape"])
            n = int(np.prod(shape, dtype=np.int64)) if shape else 1
            buf = f.read(n * dt.itemsize)
            if len(buf) != n * dt.itemsize:
                raise InputValidationError(f"truncated checkpoint {path}")
            arrays[rec["name"]] = np.frombuffer(buf, dtype=dt).reshape(shape)
    return header["kind"], arrays, header["meta"]


def params_to_arrays(prefix: str, params) -> dict:
    return {f"{prefix}.{i}": p for i, p in enumerate(params)}


def arrays_to_params(prefix: str, arrays: dict) -> list:
    out = []
    i = 0
    while f"{prefix}.{i}" in arrays:
        out.append(np.array(arrays[f"{prefix}.{i}"], dtype=np.float64))
        i += 1
    if not out:
        raise InputValidationError(f"no arrays under prefix {prefix!r}")
    return out
