"""NAdam and Adagrad over named parameter tensors, plus JSON checkpoints."""
from __future__ import annotations

import json
from collections import OrderedDict
from typing import IO

import numpy as np

from .tensor import Tensor

CHECKPOINT_VERSION = 1

Params = "OrderedDict[str, Tensor]"


class Optimizer:
    kind = ""

    def __init__(self, params: "OrderedDict[str, Tensor]", lr: float):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr = lr
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def halve_lr(self) -> float:
        self.lr *= 0.5
        return self.lr

    def step(self) -> None:
        raise NotImplementedError

    def state_dict(self) -> dict:
        return {"kind": self.kind, "lr": self.lr, "t": self.t}


class NAdam(Optimizer):
    """Adam with Nesterov momentum (constant beta1, no momentum schedule).

    m <- b1 m + (1-b1) g ;  v <- b2 v + (1-b2) g^2
    m_hat = b1 m / (1 - b1^(t+1)) + (1-b1) g / (1 - b1^t) ;  v_hat = v / (1 - b2^t)
    p <- p - lr m_hat / (sqrt(v_hat) + eps)
    """
    kind = "nadam"

    def __init__(self, params, lr=0.001, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        b1, b2, t = self.beta1, self.beta2, self.t
        for k, p in self.params.items():
            g = p.grad
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = b1 * m / (1 - b1 ** (t + 1)) + (1 - b1) * g / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.data -= (self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


class Adagrad(Optimizer):
    """p <- p - lr g / (sqrt(sum of g^2) + eps)."""
    kind = "adagrad"

    def __init__(self, params, lr=0.07, eps=1e-8):
        super().__init__(params, lr)
        self.eps = eps
        self.acc = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        for k, p in self.params.items():
            g = p.grad
            self.acc[k] += g * g
            p.data -= (self.lr * g / (np.sqrt(self.acc[k]) + self.eps)).astype(p.data.dtype)


def make_optimizer(kind: str, params, lr: float) -> Optimizer:
    if kind == "nadam":
        return NAdam(params, lr)
    if kind == "adagrad":
        return Adagrad(params, lr)
    raise ValueError(f"unknown optimizer {kind!r}")


# -- checkpoints --------------------------------------------------------------------

def snapshot(params) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((k, p.data.copy()) for k, p in params.items())


def restore(params, snap) -> None:
    for k, p in params.items():
        p.data[...] = snap[k]


def save_checkpoint(params, stream: IO[str], meta: dict | None = None) -> None:
    doc = {
        "format": "pointiso-checkpoint",
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "tensors": [
            {"name": k, "shape": list(p.data.shape), "dtype": str(p.data.dtype),
             "values": p.data.ravel().tolist()}
            for k, p in params.items()
        ],
    }
    json.dump(doc, stream)


def load_checkpoint(stream: IO[str]) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    doc = json.load(stream)
    if doc.get("format") != "pointiso-checkpoint" or doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError("not a pointiso checkpoint or unsupported version")
    out = OrderedDict()
    for t in doc["tensors"]:
        out[t["name"]] = np.asarray(t["values"], dtype=t.get("dtype", "float64")).reshape(t["shape"])
    return out, doc.get("meta", {})
