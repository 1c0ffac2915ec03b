"""First-order optimizers and the two-step sharpness-aware (SAM) update."""
from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from plastic import tensor as T
from plastic.tensor import ContractError, NumericError, Tensor

SCOPES = ("all", "backbone", "head", "actor", "critic")
NOISE_SCHEMES = ("independent", "reused", "noiseless")
DEGENERATE_NORM = 1e-12


@dataclass
class SamConfig:
    rho: float = 0.1
    scope: str = "all"
    noise_scheme: str = "independent"
    enabled: bool = True

    def __post_init__(self):
        if self.rho < 0:
            raise ContractError(f"SAM rho must be non-negative, got {self.rho}")
        if self.scope not in SCOPES:
            raise ContractError(f"unknown SAM scope {self.scope!r}; expected one of {SCOPES}")
        if self.noise_scheme not in NOISE_SCHEMES:
            raise ContractError(f"unknown noise scheme {self.noise_scheme!r}; expected one of {NOISE_SCHEMES}")

    @property
    def active(self) -> bool:
        return self.enabled and self.rho > 0


@dataclass
class OptimizerConfig:
    kind: str = "adam"  # adam | sgd
    lr: float = 1e-4
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1.5e-5
    weight_decay: float = 0.0
    max_grad_norm: float | None = None

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ContractError(f"unknown optimizer {self.kind!r}")
        self.betas = tuple(self.betas)


def clip_by_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> tuple[list[np.ndarray], float]:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if norm > max_norm:
        scale = max_norm / norm
        return [g * scale for g in grads], norm
    return list(grads), norm


class Optimizer:
    """SGD with momentum or Adam over a fixed list of parameter tensors.

    Weight decay is decoupled: ``w -= lr * wd * w`` alongside the gradient step.
    """

    def __init__(self, params: Sequence[Tensor], config: OptimizerConfig):
        self.params = list(params)
        self.config = config
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params] if config.kind == "adam" else None

    @property
    def kind(self) -> str:
        return self.config.kind

    def step(self, grads: Sequence[np.ndarray]) -> float:
        """Apply one update; returns the pre-clipping global gradient norm."""
        c = self.config
        if len(grads) != len(self.params):
            raise ContractError(f"expected {len(self.params)} gradients, got {len(grads)}")
        for p, g in zip(self.params, grads):
            if g.shape != p.shape:
                raise ContractError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            if not np.isfinite(g).all():
                raise NumericError("optimizer step: non-finite gradient")
        if c.max_grad_norm is not None:
            grads, norm = clip_by_global_norm(grads, c.max_grad_norm)
        else:
            norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
        self.t += 1
        if c.kind == "sgd":
            for i, (p, g) in enumerate(zip(self.params, grads)):
                if c.momentum:
                    self.m[i] = c.momentum * self.m[i] + g
                    g = self.m[i]
                w = p.data
                if c.weight_decay:
                    w = w - c.lr * c.weight_decay * w
                p.data = w - c.lr * g
        else:
            b1, b2 = c.betas
            bc1, bc2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
            for i, (p, g) in enumerate(zip(self.params, grads)):
                self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
                self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
                w = p.data
                if c.weight_decay:
                    w = w - c.lr * c.weight_decay * w
                p.data = w - c.lr * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + c.eps)
        return norm

    def reset_state(self, which: Sequence[int] | None = None) -> None:
        """Zero the moment buffers of the given parameter indices (all by default)."""
        for i in range(len(self.params)) if which is None else which:
            self.m[i] = np.zeros_like(self.params[i].data)
            if self.v is not None:
                self.v[i] = np.zeros_like(self.params[i].data)

    def state_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"kind": self.kind, "t": self.t,
                               "m": [{"shape": list(a.shape), "data": a.reshape(-1).tolist()} for a in self.m]}
        if self.v is not None:
            out["v"] = [{"shape": list(a.shape), "data": a.reshape(-1).tolist()} for a in self.v]
        return out

    def load_state_dict(self, d: dict[str, Any]) -> None:
        if d["kind"] != self.kind:
            raise ContractError(f"state is for {d['kind']}, optimizer is {self.kind}")
        self.t = int(d["t"])
        self.m = [np.array(e["data"], dtype=np.float64).reshape(e["shape"]) for e in d["m"]]
        if self.v is not None:
            self.v = [np.array(e["data"], dtype=np.float64).reshape(e["shape"]) for e in d["v"]]


def base_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: Optimizer) -> float:
    if [id(p) for p in params] != [id(p) for p in state.params]:
        raise ContractError("base_step: parameters do not match the optimizer state")
    return state.step(grads)


# ---------------------------------------------------------------------------
# SAM
# ---------------------------------------------------------------------------

def sam_perturbation(grads: np.ndarray, rho: float, scope_mask: np.ndarray | None = None
                     ) -> tuple[np.ndarray, bool]:
    """``rho * g / ||g||`` over the in-scope entries; returns (perturbation, degenerate)."""
    g = np.asarray(grads, dtype=np.float64)
    if scope_mask is not None:
        g = np.where(np.asarray(scope_mask, dtype=bool), g, 0.0)
    if rho == 0:
        return np.zeros_like(g), False
    norm = float(np.linalg.norm(g))
    if norm < DEGENERATE_NORM:
        return np.zeros_like(g), True
    return (rho / norm) * g, False


class NoiseSource:
    """Redraws or silences the noisy layers of some networks from one RNG stream."""

    def __init__(self, networks, rng: np.random.Generator):
        self.networks = list(networks)
        self.rng = rng

    def fresh(self) -> None:
        for net in self.networks:
            net.sample_noise(self.rng)

    def zero(self) -> None:
        for net in self.networks:
            net.zero_noise()


@dataclass
class SamStepResult:
    loss: float
    grad_norm: float
    sam_grad_norm: float | None = None
    perturbed_loss: float | None = None
    degenerate: bool = False
    extras: dict = field(default_factory=dict)


def _check_loss(loss: Tensor, where: str) -> None:
    if loss.size != 1:
        raise ContractError(f"{where}: loss must be scalar, got shape {loss.shape}")
    if not math.isfinite(loss.item()):
        raise NumericError(f"{where}: non-finite loss")


def _norm(grads: Sequence[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.vdot(g, g)) for g in grads))


def sam_gradient(loss_fn: Callable[[Any], Tensor], batch: Any, params: Sequence[Tensor], cfg: SamConfig,
                 mask: Sequence[bool] | None = None, noise: NoiseSource | None = None
                 ) -> tuple[list[np.ndarray], SamStepResult]:
    """Gradient at ``w + eps*(w)`` on ``batch``; parameters are restored bit-exactly before return."""
    params = list(params)
    if mask is not None and len(mask) != len(params):
        raise ContractError(f"scope mask has {len(mask)} entries for {len(params)} parameters")
    active = cfg.active
    if noise is not None:
        if active and cfg.noise_scheme == "noiseless":
            noise.zero()
        else:
            noise.fresh()
    loss = loss_fn(batch)
    _check_loss(loss, "sam step")
    g = [x.data for x in T.grad(loss, params)]
    result = SamStepResult(loss=loss.item(), grad_norm=_norm(g))
    if not active:
        return g, result
    flat = np.concatenate([x.reshape(-1) for x in g])
    flat_mask = None
    if mask is not None:
        flat_mask = np.concatenate([np.full(x.size, bool(m)) for x, m in zip(g, mask)])
    eps, degenerate = sam_perturbation(flat, cfg.rho, flat_mask)
    if degenerate:
        result.degenerate = True
        return g, result
    saved = [p.data for p in params]
    off = 0
    try:
        for p in params:
            k = p.data.size
            p.data = p.data + eps[off:off + k].reshape(p.shape)
            off += k
        if noise is not None and cfg.noise_scheme != "reused":
            noise.fresh()
        loss2 = loss_fn(batch)
        _check_loss(loss2, "sam step (perturbed)")
        g_sam = [x.data for x in T.grad(loss2, params)]
    finally:
        for p, w in zip(params, saved):
            p.data = w
    result.sam_grad_norm = _norm(g_sam)
    result.perturbed_loss = loss2.item()
    return g_sam, result


def sam_step(loss_fn: Callable[[Any], Tensor], batch: Any, params: Sequence[Tensor], base: Optimizer,
             cfg: SamConfig, mask: Sequence[bool] | None = None, noise: NoiseSource | None = None
             ) -> SamStepResult:
    """One m-SAM update: perturb along the normalized gradient, take the gradient there, restore, step.

    With SAM disabled, ``rho == 0`` or a degenerate gradient this is exactly a
    base-optimizer step on the gradient at the current weights.
    """
    grads, result = sam_gradient(loss_fn, batch, params, cfg, mask, noise)
    base_step(params, grads, base)
    return result


def scope_mask(network, scope: str) -> list[bool]:
    """Per-parameter SAM mask for a role-tagged network."""
    if scope not in SCOPES:
        raise ContractError(f"unknown SAM scope {scope!r}")
    if scope in ("all", "actor", "critic"):
        return [True] * len(network.params)
    mask = [network.info[n].part == scope for n in network.params]
    if not any(mask):
        raise ContractError(f"SAM scope {scope!r} selects no parameters of this network")
    return mask
