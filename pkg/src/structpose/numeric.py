"""Dense float64 arithmetic, seeded random streams and gradient verification.

Every array in the package is a ``torch.float64`` tensor.  Gradients come from
torch autograd; :func:`grad_check` is the independent contract they must
satisfy (central differences on the same scalar function).
"""

from __future__ import annotations

import logging
from typing import Callable, Sequence

import numpy as np
import torch

logger = logging.getLogger(__name__)

DTYPE = torch.float64
_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class EvaluationError(RuntimeError):
    """A function produced a non-finite value where a finite one was required."""


def as_tensor(x, dtype=DTYPE) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def check_finite(x: torch.Tensor, name: str = "value") -> torch.Tensor:
    if not bool(torch.isfinite(x).all()):
        raise EvaluationError(f"{name} contains non-finite entries")
    return x


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Matrix product with a readable shape error.

    Leading batch dimensions broadcast as in :func:`torch.matmul`.
    """
    if a.dim() < 2 or b.dim() < 2:
        raise ShapeError(f"matmul needs matrices, got a{tuple(a.shape)} and b{tuple(b.shape)}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul dimension mismatch: a{tuple(a.shape)} has {a.shape[-1]} cols, "
            f"b{tuple(b.shape)} has {b.shape[-2]} rows"
        )
    return check_finite(torch.matmul(a, b), "matmul result")


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by numpy's Philox4x64 bit generator with the key set to
    ``[seed, stream_id]``; normals use numpy's ziggurat sampler.  The draw
    sequence depends only on the key, so it replays identically on any
    platform, and :meth:`get_state`/:meth:`set_state` round-trip it exactly.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def spawn(self, stream_id: int) -> "RngStream":
        """Independent stream sharing this seed."""
        return RngStream(self.seed, stream_id)

    def normal(self, shape: Sequence[int] | int) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None):
        return self._gen.uniform(low, high, shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, shape)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def normal_tensor(self, shape: Sequence[int]) -> torch.Tensor:
        return torch.from_numpy(self.normal(tuple(shape)))

    def get_state(self) -> dict:
        st = self._gen.bit_generator.state
        inner = st["state"]
        return {
            "seed": self.seed,
            "stream_id": self.stream_id,
            "counter": [int(v) for v in inner["counter"]],
            "key": [int(v) for v in inner["key"]],
            "buffer": [int(v) for v in st["buffer"]],
            "buffer_pos": int(st["buffer_pos"]),
            "has_uint32": int(st["has_uint32"]),
            "uinteger": int(st["uinteger"]),
        }

    def set_state(self, state: dict) -> None:
        self.seed = int(state["seed"])
        self.stream_id = int(state["stream_id"])
        self._gen.bit_generator.state = {
            "bit_generator": "Philox",
            "state": {
                "counter": np.array(state["counter"], dtype=np.uint64),
                "key": np.array(state["key"], dtype=np.uint64),
            },
            "buffer": np.array(state["buffer"], dtype=np.uint64),
            "buffer_pos": int(state["buffer_pos"]),
            "has_uint32": int(state["has_uint32"]),
            "uinteger": int(state["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        rng = cls(state["seed"], state["stream_id"])
        rng.set_state(state)
        return rng


def analytic_grad(f: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().to(DTYPE).requires_grad_(True)
    y = f(x)
    if y.numel() != 1:
        raise ShapeError(f"grad_check needs a scalar function, got shape {tuple(y.shape)}")
    check_finite(y.detach(), "f(x)")
    (g,) = torch.autograd.grad(y, x, allow_unused=True)
    if g is None:
        g = torch.zeros_like(x)
    return g.detach()


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    h: float = 1e-6,
    indices: Sequence[int] | None = None,
) -> float:
    """Max relative error between autograd and central differences.

    The error per entry is ``|analytic - fd| / max(1, |analytic|)``.  By default
    every entry of ``x`` is probed; ``indices`` (flat positions) restricts the
    probe set for large parameter tensors.
    """
    if h <= 0:
        raise ValueError("step size h must be positive")
    x = x.detach().to(DTYPE)
    g = analytic_grad(f, x).reshape(-1)
    flat = x.reshape(-1)
    probe = range(flat.numel()) if indices is None else indices
    worst = 0.0
    with torch.no_grad():
        for i in probe:
            xp = flat.clone()
            xm = flat.clone()
            xp[i] += h
            xm[i] -= h
            fp = f(xp.reshape(x.shape))
            fm = f(xm.reshape(x.shape))
            if not (torch.isfinite(fp).all() and torch.isfinite(fm).all()):
                raise EvaluationError(f"f is non-finite when probing entry {i}")
            fd = (float(fp) - float(fm)) / (2 * h)
            a = float(g[i])
            worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst
