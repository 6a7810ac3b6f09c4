"""Hyperparameter search spaces and deterministic configuration sampling.

Sampling is counter-based: the random stream for a configuration is derived
from (experiment_seed, config_id) alone, so the order in which configurations
are requested never changes their values. This is what makes journal replay
bit-exact under asynchrony.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

CONTINUOUS_LINEAR = "continuous-linear"
CONTINUOUS_LOG = "continuous-log"
INTEGER_RANGE = "integer-range"
CATEGORICAL = "categorical"

KINDS = (CONTINUOUS_LINEAR, CONTINUOUS_LOG, INTEGER_RANGE, CATEGORICAL)


class InvalidSpaceError(ValueError):
    """Raised when an operation requires a valid space but got violations."""

    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("; ".join(violations))


@dataclass(frozen=True)
class Dimension:
    name: str
    kind: str
    lower: float | None = None
    upper: float | None = None
    choices: tuple[Any, ...] | None = None

    def violations(self) -> list[str]:
        out = []
        if self.kind not in KINDS:
            out.append(f"{self.name}: unknown kind {self.kind!r}")
            return out
        if self.kind == CATEGORICAL:
            if not self.choices:
                out.append(f"{self.name}: categorical requires non-empty choices")
            return out
        if self.lower is None or self.upper is None:
            out.append(f"{self.name}: {self.kind} requires lower and upper bounds")
            return out
        if self.kind == CONTINUOUS_LOG and self.lower <= 0:
            out.append(f"{self.name}: log scale requires positive lower bound")
        if not self.lower < self.upper:
            out.append(f"{self.name}: lower must be < upper")
        return out


@dataclass(frozen=True)
class Configuration:
    config_id: int
    values: dict[str, Any]
    sample_seed: int


@dataclass(frozen=True)
class SearchSpace:
    dimensions: tuple[Dimension, ...]

    def __post_init__(self):
        if not isinstance(self.dimensions, tuple):
            object.__setattr__(self, "dimensions", tuple(self.dimensions))

    def validate(self) -> list[str]:
        """Return every invariant violation; an empty list means the space is ok."""
        out: list[str] = []
        seen: set[str] = set()
        for dim in self.dimensions:
            if dim.name in seen:
                out.append(f"{dim.name}: duplicate name")
            seen.add(dim.name)
            out.extend(dim.violations())
        if not self.dimensions:
            out.append("space has no dimensions")
        return out

    def sample(self, experiment_seed: int, config_id: int) -> Configuration:
        """Deterministically sample the configuration numbered config_id.

        A pure function of (space, experiment_seed, config_id): each kind is
        uniform in its native scale (log-space for continuous-log).
        """
        violations = self.validate()
        if violations:
            raise InvalidSpaceError(violations)
        if config_id < 0:
            raise ValueError("config_id must be non-negative")
        seq = np.random.SeedSequence([int(experiment_seed) & (2**64 - 1), int(config_id)])
        rng = np.random.default_rng(seq)
        sample_seed = int(seq.generate_state(2, dtype=np.uint32).view(np.uint64)[0])
        values: dict[str, Any] = {}
        for dim in self.dimensions:
            if dim.kind == CONTINUOUS_LINEAR:
                values[dim.name] = float(rng.uniform(dim.lower, dim.upper))
            elif dim.kind == CONTINUOUS_LOG:
                values[dim.name] = float(
                    math.exp(rng.uniform(math.log(dim.lower), math.log(dim.upper)))
                )
            elif dim.kind == INTEGER_RANGE:
                values[dim.name] = int(rng.integers(int(dim.lower), int(dim.upper) + 1))
            else:
                values[dim.name] = dim.choices[int(rng.integers(len(dim.choices)))]
        return Configuration(config_id=config_id, values=values, sample_seed=sample_seed)

    def contains(self, values: dict[str, Any]) -> bool:
        if set(values) != {d.name for d in self.dimensions}:
            return False
        for dim in self.dimensions:
            v = values[dim.name]
            if dim.kind == CATEGORICAL:
                if v not in dim.choices:
                    return False
            elif dim.kind == INTEGER_RANGE:
                if not (isinstance(v, int) and dim.lower <= v <= dim.upper):
                    return False
            else:
                if not (dim.lower <= v <= dim.upper):
                    return False
        return True

    def to_dict(self) -> dict:
        dims = []
        for d in self.dimensions:
            rec: dict[str, Any] = {"name": d.name, "kind": d.kind}
            if d.kind == CATEGORICAL:
                rec["choices"] = list(d.choices)
            else:
                rec["lower"] = d.lower
                rec["upper"] = d.upper
            dims.append(rec)
        return {"dimensions": dims}

    @classmethod
    def from_dict(cls, doc: dict) -> "SearchSpace":
        dims = []
        for rec in doc.get("dimensions", []):
            dims.append(
                Dimension(
                    name=rec["name"],
                    kind=rec["kind"],
                    lower=rec.get("lower"),
                    upper=rec.get("upper"),
                    choices=tuple(rec["choices"]) if "choices" in rec else None,
                )
            )
        return cls(dimensions=tuple(dims))


def validate_space(space: SearchSpace) -> list[str]:
    """Module-level alias; returns [] when the space satisfies all invariants."""
    return space.validate()


def sample(space: SearchSpace, experiment_seed: int, config_id: int) -> Configuration:
    return space.sample(experiment_seed, config_id)
