"""Training losses and the Jacobi sweep-count schedules.

All three losses are plain sums of squares (no mesh weights, no means),
taken over a batch of predicted Green's function fields G for sources rho:

    residual:  sum over interior nodes of (L_h G - rho)^2
    jacobi:    sum over nodes of (G - G_tilde_k)^2, where G_tilde_k is G
               advanced k Jacobi sweeps toward the solution of L_h G = rho
               and treated as a constant (no gradient flows through it)
    data:      sum over nodes of (G - G_ref)^2 against converged references

The jacobi loss is the interesting one: its target costs k cheap sweeps
instead of a converged solve, and as k grows it approaches the data loss.
The sweep count k follows one of three schedules (constant, a fixed decay
staircase, or an adaptive rule driven by the validation loss).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch

from .grid import Field
from .operator import StencilCoeffs

LOSS_KINDS = ("residual", "jacobi", "data")
K_STRATEGIES = ("constant", "dynamic", "adaptive")


def fields_to_tensor(fields: list[Field]) -> torch.Tensor:
    """Stack Field values into a (B, n, m) float64 tensor."""
    return torch.from_numpy(np.stack([f.values for f in fields]))


def _coeff_tensors(stencil: StencilCoeffs):
    # torch.from_numpy shares memory with the stencil arrays, nothing is copied
    return (torch.from_numpy(stencil.cE), torch.from_numpy(stencil.cW),
            torch.from_numpy(stencil.cN), torch.from_numpy(stencil.cS),
            torch.from_numpy(stencil.diag))


def _check_batch(stencil: StencilCoeffs, G: torch.Tensor, rho: torch.Tensor | None = None):
    n, m = stencil.grid.n, stencil.grid.m
    if G.ndim != 3 or G.shape[1:] != (n, m):
        raise ValueError(f"expected G of shape (B, {n}, {m}), got {tuple(G.shape)}")
    if rho is not None and rho.shape != G.shape:
        raise ValueError(f"rho shape {tuple(rho.shape)} does not match G {tuple(G.shape)}")


def interior_residual(stencil: StencilCoeffs, G: torch.Tensor, rho: torch.Tensor) -> torch.Tensor:
    """(L_h G - rho) over interior nodes, shape (B, n-2, m-2). Differentiable."""
    cE, cW, cN, cS, diag = _coeff_tensors(stencil)
    return (
        diag * G[:, 1:-1, 1:-1]
        - cE * G[:, 2:, 1:-1]
        - cW * G[:, :-2, 1:-1]
        - cN * G[:, 1:-1, 2:]
        - cS * G[:, 1:-1, :-2]
        - rho[:, 1:-1, 1:-1]
    )


def loss_residual(stencil: StencilCoeffs, G: torch.Tensor, rho: torch.Tensor) -> torch.Tensor:
    _check_batch(stencil, G, rho)
    r = interior_residual(stencil, G, rho)
    return (r * r).sum()


def jacobi_sweep(stencil: StencilCoeffs, G: torch.Tensor, rho: torch.Tensor) -> torch.Tensor:
    """One batched Jacobi sweep; keeps the boundary ring at zero."""
    cE, cW, cN, cS, diag = _coeff_tensors(stencil)
    out = torch.zeros_like(G)
    out[:, 1:-1, 1:-1] = (
        rho[:, 1:-1, 1:-1]
        + cE * G[:, 2:, 1:-1]
        + cW * G[:, :-2, 1:-1]
        + cN * G[:, 1:-1, 2:]
        + cS * G[:, 1:-1, :-2]
    ) / diag
    return out


def jacobi_target(stencil: StencilCoeffs, G: torch.Tensor, rho: torch.Tensor, k: int) -> torch.Tensor:
    """Advance a detached copy of G by k Jacobi sweeps. The result is a
    constant with respect to the network parameters by design: gradients
    must see the sweeps as frozen targets, not unroll through them."""
    _check_batch(stencil, G, rho)
    if k < 0:
        raise ValueError(f"sweep count must be >= 0, got {k}")
    with torch.no_grad():
        t = G.detach()
        ring = (t[:, 0, :].abs().sum() + t[:, -1, :].abs().sum()
                + t[:, :, 0].abs().sum() + t[:, :, -1].abs().sum())
        if float(ring) != 0.0:
            raise ValueError("Jacobi target needs a zero boundary ring on G")
        for _ in range(k):
            t = jacobi_sweep(stencil, t, rho)
    return t


def loss_jacobi(stencil: StencilCoeffs, G: torch.Tensor, rho: torch.Tensor, k: int) -> torch.Tensor:
    target = jacobi_target(stencil, G, rho, k)
    d = G - target
    return (d * d).sum()


def loss_data(G: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    if G.shape != ref.shape:
        raise ValueError(f"shape mismatch: G {tuple(G.shape)} vs ref {tuple(ref.shape)}")
    d = G - ref
    return (d * d).sum()


# ---------------------------------------------------------------------------
# sweep-count schedules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KScheduleState:
    """Sweep count for the current epoch plus what the next update needs.

    strategy "constant": k never moves.
    strategy "dynamic":  a staircase, k0 minus step every `every` epochs,
                         never below `floor` (defaults 40/10/20/10).
    strategy "adaptive": k = 40 for the first epoch; afterwards doubled
                         when the validation loss grew by more than 20%,
                         halved (integer floor) when it fell by more than
                         20%, and always clamped to [1, 20].
    """

    strategy: str
    k: int
    epoch: int = 0
    prev_val_loss: float | None = None
    k0: int = 40
    step: int = 10
    every: int = 20
    floor: int = 10
    k_min: int = 1
    k_max: int = 20
    grow_ratio: float = 1.2
    shrink_ratio: float = 0.8


def init_schedule(strategy: str, k: int | None = None) -> KScheduleState:
    if strategy == "constant":
        if k is None or k < 1:
            raise ValueError("constant schedule needs an explicit k >= 1")
        return KScheduleState("constant", k)
    if strategy == "dynamic":
        st = KScheduleState("dynamic", 0)
        return dataclasses.replace(st, k=_dynamic_k(st, 0))
    if strategy == "adaptive":
        return KScheduleState("adaptive", 40)
    raise ValueError(f"unknown k strategy {strategy!r}, expected one of {K_STRATEGIES}")


def _dynamic_k(state: KScheduleState, epoch: int) -> int:
    return max(state.floor, state.k0 - state.step * (epoch // state.every))


def update_k(state: KScheduleState, val_loss: float) -> KScheduleState:
    """End-of-epoch transition: returns the state for the next epoch."""
    nxt = state.epoch + 1
    if state.strategy == "constant":
        return dataclasses.replace(state, epoch=nxt, prev_val_loss=val_loss)
    if state.strategy == "dynamic":
        return dataclasses.replace(state, epoch=nxt, prev_val_loss=val_loss,
                                   k=_dynamic_k(state, nxt))
    if state.strategy == "adaptive":
        k = state.k
        if state.prev_val_loss is not None:
            if val_loss > state.grow_ratio * state.prev_val_loss:
                k = k * 2
            elif val_loss < state.shrink_ratio * state.prev_val_loss:
                k = k // 2
        k = min(max(k, state.k_min), state.k_max)
        return dataclasses.replace(state, epoch=nxt, prev_val_loss=val_loss, k=k)
    raise ValueError(f"unknown k strategy {state.strategy!r}")
