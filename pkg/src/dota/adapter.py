"""Tensor adapter for one linear layer: frozen residual + trainable chain.

The adapter splits a pretrained weight W0 into a truncated core chain and
the residual W0 - reconstruct(chain). The residual stays frozen, so the
effective weight starts exactly at W0 and all training signal flows into
the cores. Gradients w.r.t. each core are exact: the upstream weight
gradient x^T dy is contracted against the chain's left and right
environments, one pass each, so a full backward costs O(N) chain
contractions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .mpo import CoreChain, MpoShape, mpo_decompose, reconstruct, reorder_for_mpo
from .tensor_core import DenseTensor


@dataclass(frozen=True)
class CoreGradients:
    """One gradient tensor per core, shaped exactly like the cores."""

    tensors: tuple[np.ndarray, ...]

    def __len__(self) -> int:
        return len(self.tensors)

    def check_against(self, chain: CoreChain) -> None:
        if len(self.tensors) != len(chain):
            raise ShapeError("gradient count does not match core count")
        for g, c in zip(self.tensors, chain.cores):
            if g.shape != c.shape:
                raise ShapeError(f"gradient shape {g.shape} != core shape {c.shape}")


def _mode_products(chain: CoreChain) -> list[int]:
    return [i * j for i, j in zip(chain.in_factors, chain.out_factors)]


def _left_environments(chain: CoreChain) -> list[np.ndarray]:
    """L[k]: contraction of cores 0..k-1, as a (prod_{m<k} I_m J_m, r_{k-1}) matrix."""
    prods = _mode_products(chain)
    envs = [np.ones((1, 1))]
    for k in range(len(chain) - 1):
        core = chain.cores[k].data.astype(np.float64, copy=False)
        r0, _, _, r1 = core.shape
        grown = np.einsum("la,amb->lmb", envs[k], core.reshape(r0, prods[k], r1))
        envs.append(grown.reshape(-1, r1))
    return envs


def _right_environments(chain: CoreChain) -> list[np.ndarray]:
    """R[k]: contraction of cores k+1..N-1, as a (r_k, prod_{m>k} I_m J_m) matrix."""
    prods = _mode_products(chain)
    n = len(chain)
    envs: list[np.ndarray] = [np.ones((1, 1))] * n
    for k in range(n - 2, -1, -1):
        core = chain.cores[k + 1].data.astype(np.float64, copy=False)
        r0, _, _, r1 = core.shape
        grown = np.einsum("amb,br->amr", core.reshape(r0, prods[k + 1], r1), envs[k + 1])
        envs[k] = grown.reshape(r0, -1)
    return envs


def chain_gradients(chain: CoreChain, dw: np.ndarray) -> CoreGradients:
    """Gradients of sum(dw * reconstruct(chain)) w.r.t. every core."""
    shape = chain.shape
    interleaved, _ = reorder_for_mpo(np.asarray(dw, dtype=np.float64), shape)
    flat = interleaved.flatten()
    prods = _mode_products(chain)
    left = _left_environments(chain)
    right = _right_environments(chain)
    grads = []
    for k in range(len(chain)):
        p_left = left[k].shape[0]
        p_right = right[k].shape[1]
        d3 = flat.reshape(p_left, prods[k], p_right)
        g = np.einsum("la,lmr,br->amb", left[k], d3, right[k])
        grads.append(np.ascontiguousarray(g.reshape(chain.cores[k].shape)))
    return CoreGradients(tuple(grads))


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a).copy()
    a.flags.writeable = False
    return a


@dataclass
class DotaAdapter:
    """Frozen residual matrix plus a trainable core chain for one layer."""

    w_res: np.ndarray
    cores: CoreChain
    shape: MpoShape

    def __post_init__(self):
        self.shape.check_matrix(self.w_res)
        if self.cores.shape != self.shape:
            raise ShapeError("core chain factors do not match the adapter shape")
        self.w_res = _freeze(self.w_res)

    @property
    def dtype(self) -> np.dtype:
        return self.w_res.dtype

    @property
    def trainable_params(self) -> int:
        return self.cores.num_params

    @property
    def frozen_params(self) -> int:
        return self.w_res.size

    def merge(self) -> np.ndarray:
        """Residual plus contracted chain, as one dense matrix."""
        return self.w_res + reconstruct(self.cores)

    def forward(self, x: np.ndarray) -> np.ndarray:
        """y = x @ w_res + x @ reconstruct(cores); the two branches are kept
        separate so the frozen and trainable paths stay distinguishable."""
        x = np.asarray(x)
        if x.ndim != 2 or x.shape[1] != self.shape.rows:
            raise ShapeError(
                f"input shape {x.shape} does not match weight rows {self.shape.rows}"
            )
        return x @ self.w_res + x @ reconstruct(self.cores)

    def backward(self, x: np.ndarray, dy: np.ndarray) -> tuple[CoreGradients, np.ndarray]:
        """Gradients of the loss w.r.t. every core, plus the input gradient.

        ``dy`` is the loss gradient at the output. The weight gradient
        x^T dy is contracted with the chain environments; dx uses the
        merged effective weight, which is algebraically identical to
        backpropagating the two branches separately.
        """
        x = np.asarray(x)
        dy = np.asarray(dy)
        if x.ndim != 2 or dy.ndim != 2 or x.shape[0] != dy.shape[0]:
            raise ShapeError(f"batch mismatch: x {x.shape} vs dy {dy.shape}")
        if x.shape[1] != self.shape.rows or dy.shape[1] != self.shape.cols:
            raise ShapeError(
                f"x {x.shape} / dy {dy.shape} do not match weight "
                f"{(self.shape.rows, self.shape.cols)}"
            )
        dw = x.T @ dy
        grads = chain_gradients(self.cores, dw)
        dx = dy @ self.merge().T
        return grads, dx

    def apply_gradients(self, grads: CoreGradients, lr: float) -> None:
        """One plain gradient-descent step on the cores; the residual is untouched."""
        grads.check_against(self.cores)
        stepped = [
            DenseTensor(c.data - lr * g.astype(c.dtype, copy=False))
            for c, g in zip(self.cores.cores, grads.tensors)
        ]
        self.cores = CoreChain(tuple(stepped))


def dota_init(
    w0: np.ndarray,
    shape: MpoShape,
    rank_threshold: int | None = None,
) -> DotaAdapter:
    """Decompose W0 at the given rank threshold and keep the leftover as a
    frozen residual, so the adapter's effective weight starts at W0."""
    w0 = np.asarray(w0)
    cores = mpo_decompose(w0, shape, rank_threshold)
    w_res = w0 - reconstruct(cores)
    return DotaAdapter(w_res=w_res, cores=cores, shape=shape)
