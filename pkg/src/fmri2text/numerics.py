"""Shared numeric primitives: validation errors, seeding, similarity,
entropy and a finite-difference gradient checker."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
import torch


class ValidationError(ValueError):
    """Raised when an input violates a documented precondition."""


class DegenerateInputError(ValidationError):
    """Raised for inputs where a quantity is mathematically undefined."""


# ---------------------------------------------------------------------------
# randomness

def derive_rng(seed: int, *stream: int | str) -> np.random.Generator:
    """Independent numpy generator for ``stream`` under a root ``seed``.

    Identical (seed, stream) pairs always yield bit-identical draws.
    """
    keys = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for s in stream:
        if isinstance(s, str):
            s = int.from_bytes(hashlib.sha256(s.encode()).digest()[:8], "little")
        keys.append(int(s))
    return np.random.default_rng(np.random.SeedSequence(keys))


def derive_seed(seed: int, *stream: int | str) -> int:
    return int(derive_rng(seed, *stream).integers(0, 2**63 - 1))


def torch_generator(seed: int, *stream: int | str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(derive_seed(seed, *stream))
    return g


# ---------------------------------------------------------------------------
# checksums

def checksum(obj: torch.nn.Module | torch.Tensor | Iterable[torch.Tensor] | np.ndarray) -> str:
    """sha256 over the raw bytes of every tensor, in registration order."""
    h = hashlib.sha256()
    if isinstance(obj, torch.nn.Module):
        tensors = [t for _, t in sorted(obj.state_dict().items())]
    elif isinstance(obj, (torch.Tensor, np.ndarray)):
        tensors = [obj]
    else:
        tensors = list(obj)
    for t in tensors:
        arr = t.detach().cpu().contiguous().numpy() if isinstance(t, torch.Tensor) else np.ascontiguousarray(t)
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# similarity and entropy

def _as_vector(x) -> torch.Tensor:
    t = torch.as_tensor(x, dtype=torch.float64) if not isinstance(x, torch.Tensor) else x
    return t.reshape(-1)


def cosine_similarity(a, b) -> float:
    """Cosine of the angle between two equal-length vectors, clamped to [-1, 1]."""
    a, b = _as_vector(a), _as_vector(b)
    if a.numel() == 0 or a.shape != b.shape:
        raise ValidationError(f"cosine_similarity needs equal nonempty vectors, got {tuple(a.shape)} and {tuple(b.shape)}")
    na, nb = torch.linalg.vector_norm(a), torch.linalg.vector_norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInputError("cosine similarity undefined for a zero-norm vector")
    return float(torch.clamp(torch.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarities between rows of ``a`` (n, d) and ``b`` (m, d)."""
    na = torch.linalg.vector_norm(a, dim=-1, keepdim=True)
    nb = torch.linalg.vector_norm(b, dim=-1, keepdim=True)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise DegenerateInputError("cosine similarity undefined for a zero-norm row")
    return torch.clamp((a / na) @ (b / nb).transpose(-1, -2), -1.0, 1.0)


def entropy(p) -> float:
    """Shannon entropy in nats; 0 log 0 is taken as 0."""
    p = _as_vector(p)
    if bool((p < 0).any()) or abs(float(p.sum()) - 1.0) > 1e-6:
        raise ValidationError("entropy expects a nonnegative vector summing to 1")
    return float(-torch.special.xlogy(p, p).sum())


def row_entropy(p: torch.Tensor) -> torch.Tensor:
    """Differentiable per-row entropy of a (..., M) probability tensor.

    The log is clamped at the smallest normal so rows with exactly-zero
    entries (softmax underflow) keep finite gradients.
    """
    return -(p * p.clamp_min(torch.finfo(p.dtype).tiny).log()).sum(dim=-1)


# ---------------------------------------------------------------------------
# gradient checking

@dataclass
class GradCheckReport:
    passed: bool
    max_rel_error: float
    n_checked: int
    tol: float
    excluded: list[int] = field(default_factory=list)
    worst_index: int | None = None
    failure: str | None = None

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        msg = f"{status} max_rel_error={self.max_rel_error:.3e} (tol {self.tol:g}) over {self.n_checked} coords"
        if self.excluded:
            msg += f", {len(self.excluded)} non-differentiable coords excluded"
        if self.failure:
            msg += f": {self.failure}"
        return msg


def grad_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    params: torch.Tensor,
    eps: float = 1e-5,
    tol: float = 1e-4,
    *,
    max_coords: int | None = None,
    seed: int = 0,
    floor: float = 1e-4,
    kink_tol: float = 1e-2,
) -> GradCheckReport:
    """Compare the autograd gradient of scalar ``f`` at ``params`` with central
    finite differences.

    The relative error per coordinate is ``|g_a - g_fd| / max(|g_a|, |g_fd|, floor)``.
    A coordinate whose one-sided differences disagree by more than ``kink_tol``
    (relative) sits on a kink or jump and is excluded, not failed.
    ``max_coords`` checks a seeded random subset of coordinates.
    """
    x = params.detach().clone().to(torch.float64).requires_grad_(True)
    value = f(x)
    if value.numel() != 1:
        raise ValidationError("grad_check needs a scalar-valued function")
    if not torch.isfinite(value):
        return GradCheckReport(False, math.inf, 0, tol, failure="non-finite value at params")
    (analytic,) = torch.autograd.grad(value, x, allow_unused=True)
    analytic = torch.zeros_like(x) if analytic is None else analytic.reshape(-1)
    f0 = float(value.detach())

    flat = x.detach().reshape(-1).clone()
    coords: Sequence[int] = range(flat.numel())
    if max_coords is not None and flat.numel() > max_coords:
        coords = sorted(derive_rng(seed, "grad_check").choice(flat.numel(), max_coords, replace=False).tolist())

    def at(i: int, delta: float) -> float:
        y = flat.clone()
        y[i] += delta
        with torch.no_grad():
            return float(f(y.reshape(x.shape)))

    worst, worst_i, excluded, n = 0.0, None, [], 0
    for i in coords:
        fp, fm = at(i, eps), at(i, -eps)
        if not (math.isfinite(fp) and math.isfinite(fm)):
            return GradCheckReport(False, math.inf, n, tol, excluded, i, f"non-finite value at coordinate {i}")
        d_plus, d_minus = (fp - f0) / eps, (f0 - fm) / eps
        if abs(d_plus - d_minus) > kink_tol * max(1.0, abs(d_plus), abs(d_minus)):
            excluded.append(i)
            continue
        numeric = (fp - fm) / (2 * eps)
        a = float(analytic[i])
        rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        n += 1
        if rel > worst:
            worst, worst_i = rel, i
    return GradCheckReport(worst <= tol, worst, n, tol, excluded, worst_i)
