"""Central finite-difference verification of tape gradients.

A check case bundles leaf input tensors with a closure that rebuilds a
scalar loss from their *current* values. The checker compares the tape
gradient at sampled coordinates against (f(x+h) - f(x-h)) / 2h.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from ..errors import ConfigError
from .tensor import Tape, Tensor

FD_STEP = 1e-5
REL_TOL = 1e-4


@dataclass
class CheckCase:
    """Leaf inputs plus a deterministic scalar-valued forward closure."""

    inputs: Sequence[Tensor]
    forward: Callable[[], Tensor]


@dataclass
class CheckResult:
    name: str
    instances: int
    coords: int
    max_rel_err: float
    tol: float = REL_TOL

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol


def relative_error(a: float, b: float, floor: float = 1e-3) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradients(case: CheckCase, rng: np.random.Generator,
                    h: float = FD_STEP, max_coords: int = 24) -> float:
    """Max relative error between tape and finite-difference gradients."""
    for t in case.inputs:
        t.grad = None
    with Tape() as tape:
        loss = case.forward()
    tape.backward(loss)

    worst = 0.0
    for t in case.inputs:
        grad = t.grad
        if grad is None:
            grad = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gflat = grad.reshape(-1)
        n = flat.size
        if n <= max_coords:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=max_coords, replace=False)
        for j in coords:
            orig = flat[j]
            flat[j] = orig + h
            up = case.forward().item()
            flat[j] = orig - h
            dn = case.forward().item()
            flat[j] = orig
            fd = (up - dn) / (2.0 * h)
            worst = max(worst, relative_error(float(gflat[j]), fd))
    return worst


class CheckRegistry:
    """Named check-case factories; each factory maps an rng to a CheckCase."""

    def __init__(self):
        self._factories: Dict[str, Callable[[np.random.Generator], CheckCase]] = {}

    def register(self, name: str):
        def deco(fn):
            if name in self._factories:
                raise ConfigError("duplicate gradcheck registration %r" % name)
            self._factories[name] = fn
            return fn

        return deco

    def names(self) -> List[str]:
        return sorted(self._factories)

    def run(self, names: Optional[Sequence[str]] = None, instances: int = 100,
            seed: int = 0, tol: float = REL_TOL,
            max_coords: int = 24) -> List[CheckResult]:
        if names is None:
            names = self.names()
        results = []
        for name in names:
            if name not in self._factories:
                raise ConfigError("unknown gradcheck op %r (known: %s)"
                                  % (name, ", ".join(self.names())))
            factory = self._factories[name]
            worst = 0.0
            coords = 0
            for i in range(instances):
                rng = np.random.default_rng([seed, i, _stable_tag(name)])
                case = factory(rng)
                worst = max(worst, check_gradients(case, rng, max_coords=max_coords))
                coords += sum(min(t.size, max_coords) for t in case.inputs)
            results.append(CheckResult(name, instances, coords, worst, tol))
        return results


def _stable_tag(name: str) -> int:
    # crc32 is stable across platforms and runs, unlike hash().
    import zlib

    return zlib.crc32(name.encode("utf-8"))


def format_report(results: Sequence[CheckResult]) -> str:
    width = max(len(r.name) for r in results) if results else 8
    lines = ["%-*s  %9s  %5s  %s" % (width, "op", "max_rel", "inst", "status")]
    for r in results:
        lines.append("%-*s  %9.3e  %5d  %s"
                     % (width, r.name, r.max_rel_err, r.instances,
                        "ok" if r.passed else "FAIL"))
    return "\n".join(lines)
