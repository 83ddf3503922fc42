"""Minimal numpy neural stack: MLP forward/backward, Adam, target networks.

Everything here is deterministic given the RNG that initialized it. Inputs may
be a single vector ``(d,)`` or a batch ``(B, d)``; parameter gradients are
summed over the batch, so mean-type losses should fold the ``1/B`` into the
upstream signal.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError


class Mlp:
    """Fully connected net with ReLU hidden layers and an identity output."""

    def __init__(self, layer_sizes: list[int], weights=None, biases=None):
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output layer sizes")
        self.layer_sizes = list(layer_sizes)
        if weights is None:
            self.weights = [np.zeros((m, n)) for m, n in zip(layer_sizes[:-1], layer_sizes[1:])]
            self.biases = [np.zeros(n) for n in layer_sizes[1:]]
        else:
            self.weights = weights
            self.biases = biases
            for w, b, m, n in zip(weights, biases, layer_sizes[:-1], layer_sizes[1:]):
                if w.shape != (m, n) or b.shape != (n,):
                    raise ValueError("parameter shapes inconsistent with layer_sizes")

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "Mlp":
        return Mlp(self.layer_sizes,
                   [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases])


def init_mlp(layer_sizes: list[int], rng: np.random.Generator) -> Mlp:
    """Uniform +-1/sqrt(fan_in) init, scale-stable for ReLU stacks."""
    net = Mlp(layer_sizes)
    for i, w in enumerate(net.weights):
        bound = 1.0 / np.sqrt(w.shape[0])
        net.weights[i] = rng.uniform(-bound, bound, size=w.shape)
        net.biases[i] = rng.uniform(-bound, bound, size=w.shape[1])
    return net


def forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    """Affine + ReLU composition; identity on the final layer."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    h = x[None, :] if single else x
    if h.shape[1] != net.layer_sizes[0]:
        raise ValueError(f"input width {h.shape[1]} != {net.layer_sizes[0]}")
    last = len(net.weights) - 1
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i != last:
            h = np.maximum(h, 0.0)
    return h[0] if single else h


def _forward_cached(net: Mlp, x: np.ndarray) -> list[np.ndarray]:
    acts = [x]
    last = len(net.weights) - 1
    h = x
    for i, (w, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ w + b
        if i != last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


@dataclass
class Grads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    x: np.ndarray

    @property
    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out


def backward(net: Mlp, x: np.ndarray, upstream: np.ndarray) -> Grads:
    """Exact reverse-mode gradients of <upstream, forward(net, x)>.

    Returns gradients w.r.t. every weight/bias and w.r.t. the input. Batch
    rows contribute additively to the parameter gradients.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    ub = upstream[None, :] if single else upstream
    if xb.shape[1] != net.layer_sizes[0]:
        raise ValueError(f"input width {xb.shape[1]} != {net.layer_sizes[0]}")
    if ub.shape != (xb.shape[0], net.layer_sizes[-1]):
        raise ValueError("upstream shape does not match network output")

    acts = _forward_cached(net, xb)
    d_w = [None] * len(net.weights)
    d_b = [None] * len(net.biases)
    delta = ub
    for i in range(len(net.weights) - 1, -1, -1):
        if i != len(net.weights) - 1:
            delta = delta * (acts[i + 1] > 0.0)  # ReLU mask on this layer's output
        d_w[i] = acts[i].T @ delta
        d_b[i] = delta.sum(axis=0)
        delta = delta @ net.weights[i].T
    dx = delta[0] if single else delta
    return Grads(d_w, d_b, dx)


def finite_difference_grads(net: Mlp, x: np.ndarray, upstream: np.ndarray,
                            h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradients of <upstream, forward(net, x)> per parameter.

    Slow by construction; this is the independent check for `backward`.
    """
    upstream = np.asarray(upstream, dtype=np.float64)

    def scalar() -> float:
        return float(np.sum(forward(net, x) * upstream))

    grads = []
    for p in net.params:
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = scalar()
            flat[j] = orig - h
            fm = scalar()
            flat[j] = orig
            gflat[j] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: list[np.ndarray], lr: float = 1e-4) -> "AdamState":
        return cls(lr=lr,
                   first_moment=[np.zeros_like(p) for p in params],
                   second_moment=[np.zeros_like(p) for p in params])


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], st: AdamState) -> None:
    """One Adam update with bias correction, in place.

    Non-finite gradients abort before any parameter or moment is touched.
    """
    if len(params) != len(st.first_moment):
        raise ValueError("optimizer state does not match parameter list")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError("gradient shape mismatch")
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient")
    st.step_count += 1
    b1, b2 = st.beta1, st.beta2
    c1 = 1.0 - b1 ** st.step_count
    c2 = 1.0 - b2 ** st.step_count
    for p, g, m, v in zip(params, grads, st.first_moment, st.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= st.lr * (m / c1) / (np.sqrt(v / c2) + st.eps_hat)


@dataclass
class TargetPair:
    """Online net plus a slow copy that only moves through polyak_update."""

    online: Mlp
    target: Mlp
    tau: float = 0.005

    @classmethod
    def create(cls, layer_sizes: list[int], rng: np.random.Generator,
               tau: float = 0.005) -> "TargetPair":
        online = init_mlp(layer_sizes, rng)
        return cls(online=online, target=online.copy(), tau=tau)

    def __post_init__(self):
        if self.online.layer_sizes != self.target.layer_sizes:
            raise ValueError("online/target layer sizes differ")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must be in (0, 1]")


def polyak_update(pair: TargetPair) -> None:
    t = pair.tau
    for pt, po in zip(pair.target.params, pair.online.params):
        pt *= 1.0 - t
        pt += t * po


def net_to_json(net: Mlp) -> dict:
    """Checkpoint document; float repr round-trips bit-exactly through json."""
    return {
        "layer_sizes": net.layer_sizes,
        "weights": [[float(v) for v in w.reshape(-1)] for w in net.weights],
        "biases": [[float(v) for v in b] for b in net.biases],
    }


def net_from_json(doc: dict) -> Mlp:
    sizes = list(doc["layer_sizes"])
    weights = [np.asarray(w, dtype=np.float64).reshape(m, n)
               for w, m, n in zip(doc["weights"], sizes[:-1], sizes[1:])]
    biases = [np.asarray(b, dtype=np.float64) for b in doc["biases"]]
    return Mlp(sizes, weights, biases)


def save_net(path, net: Mlp) -> None:
    with open(path, "w") as fh:
        json.dump(net_to_json(net), fh)


def load_net(path) -> Mlp:
    with open(path) as fh:
        return net_from_json(json.load(fh))
