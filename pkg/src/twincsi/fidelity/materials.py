"""EM material model: complex relative permittivity, presets and twin-vs-real deltas."""

from __future__ import annotations

import math
from typing import NamedTuple

from ..scene import Material

VACUUM_PERMITTIVITY = 8.8541878128e-12  # F/m

PRESET_TABLE_VERSION = "itu-r-p2040-3"

# ITU-R P.2040 Table 3: eps_r = a * f**b, sigma = c * f**d with f in GHz.
_ITU_COEFFS = {
    "concrete": (5.24, 0.0, 0.0462, 0.7822),
    "brick": (3.75, 0.0, 0.038, 0.0),
    "plasterboard": (2.73, 0.0, 0.0085, 0.9395),
    "wood": (1.99, 0.0, 0.0047, 1.0718),
    "glass": (6.31, 0.0, 0.0036, 1.3394),
    "very_dry_ground": (3.0, 0.0, 0.00015, 2.52),
    "medium_dry_ground": (15.0, -0.1, 0.035, 1.63),
    "wet_ground": (30.0, -0.4, 0.15, 1.30),
}
_ALIASES = {"drywall": "plasterboard", "wet_earth": "wet_ground"}


def itu_material(name: str, freq_hz: float) -> Material:
    """Evaluate an ITU-R P.2040 material at ``freq_hz``; ``drywall`` and ``wet_earth`` are aliases."""
    key = _ALIASES.get(name, name)
    try:
        a, b, c, d = _ITU_COEFFS[key]
    except KeyError:
        raise KeyError(f"unknown material preset {name!r}; known: {sorted(_ITU_COEFFS) + sorted(_ALIASES)}") from None
    f_ghz = freq_hz / 1e9
    return Material(name, a * f_ghz**b, c * f_ghz**d)


def preset_table(freq_hz: float = 3.5e9) -> dict[str, Material]:
    names = list(_ITU_COEFFS) + list(_ALIASES)
    return {n: itu_material(n, freq_hz) for n in names}


def complex_permittivity(material: Material, freq: float) -> complex:
    if not freq > 0:
        raise ValueError("frequency must be positive")
    omega = 2 * math.pi * freq
    return complex(material.eps_r, -material.sigma / (VACUUM_PERMITTIVITY * omega))


class MaterialDelta(NamedTuple):
    delta_eps_r: float
    delta_sigma: float
    sigma_absolute: bool  # True when the real conductivity is zero and delta_sigma is |difference|


def material_delta(real: Material, twin: Material) -> MaterialDelta:
    d_eps = abs(real.eps_r - twin.eps_r) / real.eps_r
    if real.sigma == 0:
        return MaterialDelta(d_eps, abs(twin.sigma), True)
    return MaterialDelta(d_eps, abs(real.sigma - twin.sigma) / real.sigma, False)
