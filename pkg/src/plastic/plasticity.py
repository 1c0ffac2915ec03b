"""Plasticity diagnostics (Hessian sharpness, active units) and reset interventions."""
from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from plastic import tensor as T
from plastic.nn import BACKBONE, HEAD, Network
from plastic.optim import Optimizer
from plastic.tensor import ContractError, Tensor


class PolicyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# curvature
# ---------------------------------------------------------------------------

@dataclass
class ProbeConfig:
    probe_batch_size: int = 512
    power_iters: int = 100
    power_tol: float = 1e-4
    probe_layers: str | Sequence[str] = "all"  # all | head | backbone | explicit layer names
    seed: int = 0


@dataclass
class EigenEstimate:
    value: float
    iterations: int
    converged: bool
    flat: bool = False

    def __float__(self) -> float:
        return self.value


class HessianOperator:
    """v -> H v for a fixed loss, reusing one differentiable first-order pass."""

    def __init__(self, loss_fn: Callable[[], Tensor], params: Sequence[Tensor]):
        self.params = list(params)
        with T._grad_mode(True):
            loss = loss_fn()
            if loss.size != 1:
                raise ContractError(f"Hessian probe: loss must be scalar, got shape {loss.shape}")
            self.grads = T.grad(loss, self.params, create_graph=True)
        self.sizes = [p.data.size for p in self.params]
        self.dim = sum(self.sizes)

    def __call__(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.size != self.dim:
            raise ContractError(f"Hessian probe: vector has {v.size} entries, expected {self.dim}")
        with T._grad_mode(True):
            dot, off = None, 0
            for g, k in zip(self.grads, self.sizes):
                term = T.sum_(T.mul(g, v[off:off + k].reshape(g.shape)))
                dot = term if dot is None else T.add(dot, term)
                off += k
            if not dot.requires_grad:
                return np.zeros(self.dim)
            hv = T.grad(dot, self.params)
        return np.concatenate([h.data.reshape(-1) for h in hv])


def power_iteration(matvec: Callable[[np.ndarray], np.ndarray], dim: int, iters: int = 100,
                    tol: float = 1e-4, seed: int = 0) -> EigenEstimate:
    """Dominant eigenvalue (by magnitude) of a symmetric operator, signed by its Rayleigh quotient."""
    v = np.random.default_rng(seed).standard_normal(dim)
    v /= np.linalg.norm(v)
    prev = None
    rq = 0.0
    for it in range(1, iters + 1):
        hv = matvec(v)
        norm = float(np.linalg.norm(hv))
        if norm == 0.0:
            return EigenEstimate(0.0, it, True, flat=True)
        rq = float(v @ hv)
        v = hv / norm
        if prev is not None and abs(rq - prev) < tol * abs(rq):
            return EigenEstimate(rq, it, True)
        prev = rq
    return EigenEstimate(rq, iters, False)


def lambda_max(loss_fn: Callable[[Tensor], Tensor], params: np.ndarray,
               cfg: ProbeConfig | None = None) -> EigenEstimate:
    """Largest-magnitude Hessian eigenvalue of a scalar loss of a flat parameter vector."""
    cfg = cfg or ProbeConfig()
    w = Tensor(np.array(params, dtype=np.float64).reshape(-1), requires_grad=True)
    op = HessianOperator(lambda: loss_fn(w), [w])
    return power_iteration(op, op.dim, cfg.power_iters, cfg.power_tol, cfg.seed)


def network_lambda_max(net: Network, loss_of_output: Callable[[Tensor], Tensor], inputs: np.ndarray,
                       cfg: ProbeConfig | None = None) -> EigenEstimate:
    """Sharpness of ``loss_of_output(net(inputs))`` in all network parameters, noise off."""
    cfg = cfg or ProbeConfig()
    saved = net.get_noise()
    net.zero_noise()
    try:
        op = HessianOperator(lambda: loss_of_output(net(inputs)), net.parameters())
        return power_iteration(op, op.dim, cfg.power_iters, cfg.power_tol, cfg.seed)
    finally:
        net.set_noise(saved)


# ---------------------------------------------------------------------------
# active units
# ---------------------------------------------------------------------------

def _probe_names(net: Network, probe_layers) -> list[str]:
    parts = net.activation_parts()
    if isinstance(probe_layers, str):
        if probe_layers == "all":
            return [n for n, _ in parts]
        if probe_layers in (HEAD, BACKBONE):
            return [n for n, p in parts if p == probe_layers]
        probe_layers = [probe_layers]
    names = {n for n, _ in parts}
    missing = [n for n in probe_layers if n not in names]
    if missing:
        raise ContractError(f"not activation layers of this network: {missing}")
    return list(probe_layers)


def record_activations(net: Network, inputs: np.ndarray) -> list[tuple[str, np.ndarray]]:
    """Post-activation outputs of every activation layer, computed with noise off."""
    saved = net.get_noise()
    net.zero_noise()
    record: list = []
    try:
        with T.no_grad():
            net(inputs, record=record)
    finally:
        net.set_noise(saved)
    return record


def active_fraction(net: Network, probe_batch: np.ndarray, probe_layers: str | Sequence[str] = "all") -> float:
    """Fraction of post-activation entries strictly above zero across the probed layers."""
    probe_batch = np.asarray(probe_batch, dtype=np.float64)
    if probe_batch.ndim == 0 or probe_batch.shape[0] == 0:
        raise ContractError("active_fraction: empty probe batch")
    wanted = set(_probe_names(net, probe_layers))
    if not wanted:
        raise ContractError(f"active_fraction: {probe_layers!r} selects no activation layers")
    active = total = 0
    for name, out in record_activations(net, probe_batch):
        if name in wanted:
            active += int(np.count_nonzero(out > 0))
            total += out.size
    return active / total


# ---------------------------------------------------------------------------
# resets
# ---------------------------------------------------------------------------

@dataclass
class ResetPolicy:
    interval: int
    scope: str = HEAD  # head | backbone | all
    mode: str = "hard"  # hard | shrink-perturb
    alpha: float = 0.8

    def __post_init__(self):
        if self.interval < 1:
            raise PolicyError(f"reset interval must be positive, got {self.interval}")
        if self.scope not in (HEAD, BACKBONE, "all"):
            raise PolicyError(f"unknown reset scope {self.scope!r}")
        if self.mode not in ("hard", "shrink-perturb"):
            raise PolicyError(f"unknown reset mode {self.mode!r}")
        if self.mode == "shrink-perturb" and not 0.0 <= self.alpha <= 1.0:
            raise PolicyError(f"shrink-perturb alpha must lie in [0, 1], got {self.alpha}")

    def due(self, step: int) -> bool:
        return step > 0 and step % self.interval == 0


@dataclass
class ResetEvent:
    step: int
    scope: str
    mode: str
    params: list[str] = field(default_factory=list)


def shrink_perturb(theta: np.ndarray, phi: np.ndarray, alpha: float) -> np.ndarray:
    """``alpha * theta + (1 - alpha) * phi``, exact at both endpoints."""
    if alpha == 1.0:
        return theta.copy()
    if alpha == 0.0:
        return phi.copy()
    return alpha * theta + (1.0 - alpha) * phi


def reset_parameters(net: Network, policy: ResetPolicy, rng: np.random.Generator, step: int = 0,
                     optimizers: Sequence[Optimizer] = ()) -> ResetEvent:
    """Apply ``policy`` unconditionally; see :func:`apply_reset` for the scheduled form."""
    names = net.names(None if policy.scope == "all" else policy.scope)
    if not names:
        raise PolicyError(f"reset scope {policy.scope!r} selects no parameters")
    fresh = net.draw_init(rng, names)
    for n in names:
        p = net.params[n]
        p.data = fresh[n] if policy.mode == "hard" else shrink_perturb(p.data, fresh[n], policy.alpha)
    touched = {id(net.params[n]) for n in names}
    for opt in optimizers:
        idx = [i for i, p in enumerate(opt.params) if id(p) in touched]
        if idx:
            opt.reset_state(idx)
    return ResetEvent(step, policy.scope, policy.mode, names)


def apply_reset(net: Network, policy: ResetPolicy, step: int, rng: np.random.Generator,
                optimizers: Sequence[Optimizer] = ()) -> ResetEvent | None:
    """Reset in-scope parameters when ``step`` is a positive multiple of the interval."""
    if not policy.due(step):
        return None
    return reset_parameters(net, policy, rng, step, optimizers)

