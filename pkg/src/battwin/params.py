"""Cell parameter set: loading, validation, and table lookups.

All quantities are SI unless noted.  Open-circuit-potential curves and the
electrolyte conductivity are tabulated; lookups are piecewise linear.  JSON
field names match the attribute names below (Greek letters rendered ASCII:
``eps_n`` for porosity, ``sigma_n`` for solid conductivity, ``kappa_e`` for
the electrolyte conductivity table).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, fields
from functools import cached_property
from importlib import resources

import numpy as np

from .errors import ParameterError

FARADAY = 96485.33212  # C/mol
GAS_CONSTANT = 8.314462618  # J/(mol K)

_TABLE_FIELDS = ("kappa_e", "U_n", "U_p")


class Curve:
    """Piecewise-linear table of (x, y) pairs with derivative lookup."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
            raise ValueError("curve needs an (N, 2) array with N >= 2")
        order = np.argsort(pts[:, 0])
        self.x = np.ascontiguousarray(pts[order, 0])
        self.y = np.ascontiguousarray(pts[order, 1])
        if np.any(np.diff(self.x) <= 0):
            raise ValueError("curve abscissae must be strictly increasing")
        self.slope = np.diff(self.y) / np.diff(self.x)

    def __call__(self, q):
        return np.interp(q, self.x, self.y)

    def deriv(self, q):
        idx = np.clip(np.searchsorted(self.x, q, side="right") - 1, 0, len(self.slope) - 1)
        return self.slope[idx]

    def points(self):
        return np.column_stack([self.x, self.y])


@dataclass(frozen=True, eq=False)
class ParameterSet:
    """Physical and geometric constants of one cell, plus operating limits.

    ``Q`` is the nominal capacity in A*h and defines the 1C current; applied
    C-rates are converted to current density via ``Q / A_cell``.
    """

    L_n: float          # negative electrode thickness (m)
    L_sep: float        # separator thickness (m)
    L_p: float          # positive electrode thickness (m)
    R_n: float          # negative particle radius (m)
    R_p: float          # positive particle radius (m)
    c_max_n: float      # max solid concentration, negative (mol/m^3)
    c_max_p: float      # max solid concentration, positive (mol/m^3)
    x_n0: float         # initial (fully charged) negative stoichiometry
    x_p0: float         # initial (fully charged) positive stoichiometry
    D_n: float          # solid diffusivity, negative (m^2/s)
    D_p: float          # solid diffusivity, positive (m^2/s)
    D_e: float          # electrolyte diffusivity (m^2/s)
    c_e0: float         # initial electrolyte concentration (mol/m^3)
    t_plus: float       # cation transference number
    eps_n: float        # porosity, negative electrode
    eps_sep: float      # porosity, separator
    eps_p: float        # porosity, positive electrode
    b: float            # Bruggeman exponent
    k_n: float          # reaction rate constant, negative (m^2.5 mol^-0.5 s^-1)
    k_p: float          # reaction rate constant, positive
    sigma_n: float      # solid conductivity, negative (S/m)
    sigma_p: float      # solid conductivity, positive (S/m)
    kappa_e: Curve      # electrolyte conductivity vs concentration (S/m)
    U_n: Curve          # open-circuit potential, negative (V vs stoichiometry)
    U_p: Curve          # open-circuit potential, positive
    a_n: float          # active surface area per volume, negative (1/m)
    a_p: float          # active surface area per volume, positive (1/m)
    T: float            # temperature (K)
    V_cut: float        # lower voltage cutoff (V)
    Q: float            # nominal capacity (A*h) defining 1C
    A_cell: float       # electrode plate area (m^2)

    def __post_init__(self):
        self.validate()

    # -- derived quantities -------------------------------------------------

    @cached_property
    def eps_s_n(self) -> float:
        """Active-material volume fraction implied by a_n = 3*eps_s/R_n."""
        return self.a_n * self.R_n / 3.0

    @cached_property
    def eps_s_p(self) -> float:
        return self.a_p * self.R_p / 3.0

    @cached_property
    def i_1c(self) -> float:
        """Current density of a 1C discharge (A/m^2)."""
        return self.Q / self.A_cell

    @cached_property
    def v_oc_full(self) -> float:
        """Open-circuit voltage of the fully charged cell."""
        return float(self.U_p(self.x_p0) - self.U_n(self.x_n0))

    def current_density(self, crate: float) -> float:
        """Convert a C-rate to applied current density (A/m^2)."""
        return crate * self.i_1c

    # -- validation ---------------------------------------------------------

    def validate(self):
        positive = ("L_n", "L_sep", "L_p", "R_n", "R_p", "c_max_n", "c_max_p",
                    "D_n", "D_p", "D_e", "c_e0", "k_n", "k_p", "sigma_n",
                    "sigma_p", "a_n", "a_p", "T", "Q", "A_cell", "b")
        for name in positive:
            v = getattr(self, name)
            if not np.isfinite(v) or v <= 0:
                raise ParameterError(name, f"must be strictly positive, got {v}")
        if not 0.0 < self.t_plus < 1.0:
            raise ParameterError("t_plus", f"must lie in (0, 1), got {self.t_plus}")
        for name in ("eps_n", "eps_sep", "eps_p"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ParameterError(name, f"porosity must lie in (0, 1), got {v}")
        for name in ("x_n0", "x_p0"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ParameterError(name, f"stoichiometry must lie in [0, 1], got {v}")
        for name, eps, rad, area in (("a_n", self.eps_n, self.R_n, self.a_n),
                                     ("a_p", self.eps_p, self.R_p, self.a_p)):
            if area * rad / 3.0 + eps >= 1.0:
                raise ParameterError(name, "implied solid fraction a*R/3 plus porosity exceeds 1")
        for name in ("U_n", "U_p"):
            curve = getattr(self, name)
            if not isinstance(curve, Curve):
                raise ParameterError(name, "must be a tabulated curve")
            if curve.x[0] > 0.0 or curve.x[-1] < 1.0:
                raise ParameterError(name, "table must cover stoichiometry range [0, 1]")
            if not np.all(np.isfinite(curve.y)):
                raise ParameterError(name, "table contains non-finite potentials")
        ke = self.kappa_e
        if not isinstance(ke, Curve):
            raise ParameterError("kappa_e", "must be a tabulated curve")
        if ke.x[0] > 0.0 or ke.x[-1] < 2.0 * self.c_e0:
            raise ParameterError("kappa_e", "table must cover [0, 2*c_e0]")
        if np.any(ke.y < 0) or not np.all(np.isfinite(ke.y)):
            raise ParameterError("kappa_e", "conductivities must be finite and non-negative")
        if not np.isfinite(self.V_cut):
            raise ParameterError("V_cut", "must be finite")
        if self.V_cut >= self.v_oc_full:
            raise ParameterError(
                "V_cut", f"cutoff {self.V_cut} V is not below the fully charged "
                f"open-circuit voltage {self.v_oc_full:.4f} V")

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in _TABLE_FIELDS:
                out[f.name] = [[float(a), float(c)] for a, c in v.points()]
            else:
                out[f.name] = float(v)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterSet":
        expected = {f.name for f in fields(cls)}
        missing = expected - set(d)
        if missing:
            raise ParameterError(sorted(missing)[0], "missing from parameter file")
        extra = set(d) - expected
        if extra:
            raise ParameterError(sorted(extra)[0], "unknown parameter field")
        kwargs = {}
        for f in fields(cls):
            v = d[f.name]
            if f.name in _TABLE_FIELDS:
                try:
                    kwargs[f.name] = Curve(v)
                except (ValueError, TypeError) as exc:
                    raise ParameterError(f.name, str(exc)) from exc
            else:
                kwargs[f.name] = float(v)
        return cls(**kwargs)

    def digest(self) -> str:
        """Stable content hash, used in dataset and checkpoint manifests."""
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def save_parameters(params: ParameterSet, path) -> None:
    with open(path, "w") as fh:
        json.dump(params.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_parameters(path) -> ParameterSet:
    with open(path) as fh:
        try:
            d = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParameterError("file", f"not valid JSON: {exc}") from exc
    return ParameterSet.from_dict(d)


def default_parameters() -> ParameterSet:
    """The bundled graphite/NMC-style parameter set."""
    text = resources.files("battwin.data").joinpath("params_default.json").read_text()
    return ParameterSet.from_dict(json.loads(text))
