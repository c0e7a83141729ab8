"""Network container, loss functions and the config-driven builder."""

from __future__ import annotations

import numpy as np

from . import layers as L


class Network:
    """Ordered stack of layers with chained forward/backward."""

    def __init__(self, layer_list: list[L.Layer]):
        names = [ly.name for ly in layer_list]
        if len(names) != len(set(names)):
            raise ValueError(f"duplicate layer names: {names}")
        self.layers = layer_list

    def forward(self, x, train=True):
        for ly in self.layers:
            x = ly.forward(x, train=train)
        return x

    def backward(self, dy):
        for ly in reversed(self.layers):
            dy = ly.backward(dy)
        return dy

    def zero_grads(self):
        for ly in self.layers:
            ly.zero_grads()

    def reset_state(self):
        for ly in self.layers:
            if hasattr(ly, "reset_state"):
                ly.reset_state()

    # -- parameter access ---------------------------------------------------

    def param_items(self):
        """Yield (key, layer, param_name) for every parameter, in layer order."""
        for ly in self.layers:
            for pname in sorted(ly.params):
                yield f"{ly.name}.{pname}", ly, pname

    def get_params(self) -> dict[str, np.ndarray]:
        return {key: ly.params[p].copy() for key, ly, p in self.param_items()}

    def set_params(self, values: dict[str, np.ndarray]):
        for key, ly, p in self.param_items():
            if key in values:
                ly.params[p] = values[key].astype(ly.params[p].dtype, copy=True)

    def get_grads(self) -> dict[str, np.ndarray]:
        return {key: ly.grads[p] for key, ly, p in self.param_items()}

    def quant_group_map(self) -> dict[str, list[str]]:
        """group_id -> list of parameter keys quantized with one shared step."""
        out: dict[str, list[str]] = {}
        for ly in self.layers:
            groups = ly.quant_groups()
            for i, names in enumerate(groups):
                gid = ly.name if len(groups) == 1 else f"{ly.name}.{i}"
                out[gid] = [f"{ly.name}.{n}" for n in names]
        return out


# -- losses -----------------------------------------------------------------

_EPS = 1e-12


def cross_entropy(probs: np.ndarray, labels: np.ndarray):
    """Mean negative log-likelihood of integer labels; returns (loss, dprobs).

    `probs` may be (batch, classes) or (time, batch, classes); labels match
    the leading shape.
    """
    p = probs.reshape(-1, probs.shape[-1])
    y = labels.reshape(-1)
    n = p.shape[0]
    picked = np.clip(p[np.arange(n), y], _EPS, None)
    loss = -float(np.log(picked).sum()) / n
    dp = np.zeros_like(p)
    dp[np.arange(n), y] = -1.0 / (picked * n)
    return loss, dp.reshape(probs.shape)


def squared_error(outputs: np.ndarray, targets: np.ndarray):
    """Mean (1/2)||out - target||^2 per sample; returns (loss, doutputs)."""
    d = outputs - targets
    n = outputs.shape[0]
    return 0.5 * float(np.sum(d * d)) / n, d / n


def classification_error(probs: np.ndarray, labels: np.ndarray) -> float:
    """Error rate in percent."""
    pred = probs.reshape(-1, probs.shape[-1]).argmax(axis=1)
    return 100.0 * float(np.mean(pred != labels.reshape(-1)))


def bits_per_char(probs: np.ndarray, labels: np.ndarray) -> float:
    """Average negative log2 likelihood per character."""
    p = probs.reshape(-1, probs.shape[-1])
    y = labels.reshape(-1)
    picked = np.clip(p[np.arange(p.shape[0]), y], _EPS, None)
    return -float(np.mean(np.log2(picked)))


# -- builder ----------------------------------------------------------------

def build_network(layer_cfgs: list[dict], rng: np.random.Generator, dtype=np.float64) -> Network:
    """Build a Network from a list of layer description dicts.

    Supported kinds: fc, activation, softmax, flatten, conv2d, maxpool2d,
    batchnorm, lstm.  Initialization draws from `rng` in layer order, so a
    fixed seed gives identical parameters.
    """
    out = []
    for i, cfg in enumerate(layer_cfgs):
        kind = cfg["kind"]
        name = cfg.get("name", f"{kind}{i}")
        if kind == "fc":
            out.append(L.FullyConnected(name, cfg["in"], cfg["out"], rng, dtype=dtype))
        elif kind == "activation":
            out.append(L.Activation(name, cfg["fn"], dtype=dtype))
        elif kind == "softmax":
            out.append(L.Softmax(name, dtype=dtype))
        elif kind == "flatten":
            out.append(L.Flatten(name, dtype=dtype))
        elif kind == "conv2d":
            out.append(
                L.Conv2D(
                    name, cfg["in_ch"], cfg["out_ch"], cfg["kernel"], rng,
                    stride=cfg.get("stride", 1), padding=cfg.get("padding", 0),
                    dtype=dtype,
                )
            )
        elif kind == "maxpool2d":
            out.append(L.MaxPool2D(name, cfg["size"], stride=cfg.get("stride"), dtype=dtype))
        elif kind == "batchnorm":
            out.append(
                L.BatchNorm(
                    name, cfg["features"], momentum=cfg.get("momentum", 0.9),
                    eps=cfg.get("eps", 1e-5), dtype=dtype,
                )
            )
        elif kind == "lstm":
            out.append(
                L.LSTM(
                    name, cfg["in"], cfg["hidden"], rng,
                    stateful=cfg.get("stateful", False), dtype=dtype,
                )
            )
        else:
            raise ValueError(f"unknown layer kind {kind!r}")
    return Network(out)
