"""Serial-correlation kernels K(s, t) for the process omega_i.

All kernels have unit scale; the variance gamma2 is carried separately.

    brownian            min(s, t)
    fractional_brownian 0.5 * (s^2h + t^2h - |s - t|^2h)
    ornstein_uhlenbeck  exp(-alpha |s - t|)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FAMILIES = ("none", "brownian", "fractional_brownian", "ornstein_uhlenbeck")


class KernelError(ValueError):
    pass


@dataclass(frozen=True)
class KernelSpec:
    family: str = "none"
    h: float = 0.5
    alpha: float = 1.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise KernelError(f"unknown kernel family {self.family!r}")
        if self.family == "fractional_brownian" and not 0 < self.h <= 1:
            raise KernelError(f"Hurst exponent must lie in (0, 1], got {self.h}")
        if self.family == "ornstein_uhlenbeck" and not self.alpha > 0:
            raise KernelError(f"OU rate must be positive, got {self.alpha}")

    @property
    def stochastic(self) -> bool:
        return self.family != "none"

    @property
    def needs_positive_times(self) -> bool:
        return self.family in ("brownian", "fractional_brownian")

    @property
    def parameter(self) -> float | None:
        """The tunable shape parameter (OU rate or Hurst exponent), if any."""
        if self.family == "ornstein_uhlenbeck":
            return self.alpha
        if self.family == "fractional_brownian":
            return self.h
        return None

    def with_parameter(self, value: float) -> "KernelSpec":
        if self.family == "ornstein_uhlenbeck":
            return KernelSpec(self.family, alpha=float(value))
        if self.family == "fractional_brownian":
            return KernelSpec(self.family, h=float(value))
        raise KernelError(f"kernel {self.family!r} has no tunable parameter")

    def __str__(self) -> str:
        if self.family == "brownian":
            return "bm"
        if self.family == "fractional_brownian":
            return f"fbm:h={self.h!r}"
        if self.family == "ornstein_uhlenbeck":
            return f"ou:alpha={self.alpha!r}"
        return "none"


def parse_kernel(text: str) -> KernelSpec:
    """Parse ``none | bm | fbm:h=<v> | ou:alpha=<v>``."""
    name, _, rest = text.strip().partition(":")
    params = {}
    for item in filter(None, rest.split(",")):
        key, eq, value = item.partition("=")
        if not eq:
            raise KernelError(f"bad kernel parameter {item!r}")
        params[key.strip()] = float(value)
    name = name.lower()
    if name == "none" and not params:
        return KernelSpec("none")
    if name in ("bm", "brownian") and not params:
        return KernelSpec("brownian")
    if name in ("fbm", "fractional_brownian") and set(params) <= {"h"}:
        return KernelSpec("fractional_brownian", h=params.get("h", 0.5))
    if name in ("ou", "ornstein_uhlenbeck") and set(params) <= {"alpha"}:
        return KernelSpec("ornstein_uhlenbeck", alpha=params.get("alpha", 1.0))
    raise KernelError(f"cannot parse kernel {text!r}")


def _check_times(spec: KernelSpec, t: np.ndarray) -> None:
    if spec.needs_positive_times and np.any(t <= 0):
        raise KernelError(f"{spec.family} kernel needs strictly positive times")


def _k(spec: KernelSpec, s, t):
    if spec.family == "none":
        return np.zeros(np.broadcast(s, t).shape)
    if spec.family == "brownian" or (spec.family == "fractional_brownian" and spec.h == 0.5):
        return np.minimum(s, t)
    if spec.family == "fractional_brownian":
        e = 2.0 * spec.h
        return 0.5 * (s ** e + t ** e - np.abs(s - t) ** e)
    return np.exp(-spec.alpha * np.abs(s - t))


def kernel_matrix(spec: KernelSpec, times) -> np.ndarray:
    t = np.asarray(times, dtype=float)
    if t.ndim != 1:
        raise KernelError("times must be one-dimensional")
    if t.size > 1 and not np.all(np.diff(t) > 0):
        raise KernelError("times must be strictly increasing")
    _check_times(spec, t)
    return _k(spec, t[:, None], t[None, :])


def kernel_cross(spec: KernelSpec, t: float, anchor: float) -> float:
    """K(t, anchor)."""
    _check_times(spec, np.array([t, anchor], dtype=float))
    return float(_k(spec, float(t), float(anchor)))
