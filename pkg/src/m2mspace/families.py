"""Serializable parametric families for the chi, psi and phi slots of test functionals.

Each family is bounded by construction; chi families vanish at 0 and psi
families vanish whenever one of their arguments is 0. Descriptors are
plain dicts such as ``{"family": "clip", "C": 10}``.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidSpec


class Family:
    name = ""
    slot = ""

    def __init__(self, **params):
        self.params = params

    def to_dict(self) -> dict:
        return {"family": self.name, **self.params}

    def _positive(self, key, default=None):
        v = self.params.get(key, default)
        if v is None:
            raise InvalidSpec(f"{self.slot} family {self.name!r} needs parameter {key!r}")
        try:
            v = float(v)
        except (TypeError, ValueError):
            raise InvalidSpec(f"{self.slot} parameter {key!r} must be a number, got {v!r}") from None
        if not np.isfinite(v) or v <= 0:
            raise InvalidSpec(f"{self.slot} parameter {key!r} must be positive, got {v!r}")
        return v

    def _no_shift(self, constraint):
        shift = float(self.params.get("shift", 0.0))
        if shift != 0.0:
            raise InvalidSpec(f"{self.slot} family {self.name!r} with shift={shift} violates {constraint}")

    def check_arity(self, m: int, size: int) -> None:
        pass

    def __repr__(self):
        return f"{self.slot}:{self.to_dict()}"


# -- chi: R+ -> R, bounded, chi(0) = 0 ----------------------------------------

class ChiClip(Family):
    name, slot = "clip", "chi"

    def __init__(self, **params):
        super().__init__(**params)
        self.C = self._positive("C")
        self._no_shift("chi(0) = 0")

    def __call__(self, x):
        return np.minimum(x, self.C)


class ChiTanh(Family):
    name, slot = "tanh", "chi"

    def __init__(self, **params):
        super().__init__(**params)
        self.C = self._positive("C")
        self._no_shift("chi(0) = 0")

    def __call__(self, x):
        return self.C * np.tanh(np.asarray(x, dtype=float) / self.C)


class ChiPowerClip(Family):
    name, slot = "power_clip", "chi"

    def __init__(self, **params):
        super().__init__(**params)
        self.C = self._positive("C")
        self.p = self._positive("p")
        self._no_shift("chi(0) = 0")

    def __call__(self, x):
        return np.minimum(np.power(x, self.p), self.C)


# -- psi: R+^m -> R, bounded, zero on coordinate hyperplanes --------------------

class PsiClipProduct(Family):
    """``prod_i min(a_i, C) / C^(m-1)``."""

    name, slot = "clip_product", "psi"

    def __init__(self, **params):
        super().__init__(**params)
        self.C = self._positive("C")
        self._no_shift("psi = 0 on coordinate hyperplanes")

    def __call__(self, a):
        a = np.asarray(a, dtype=float)
        m = a.shape[-1]
        return np.prod(np.minimum(a, self.C), axis=-1) / self.C ** (m - 1)


class PsiTanhProduct(Family):
    name, slot = "tanh_product", "psi"

    def __init__(self, **params):
        super().__init__(**params)
        self.C = self._positive("C")
        self._no_shift("psi = 0 on coordinate hyperplanes")

    def __call__(self, a):
        return np.prod(np.tanh(np.asarray(a, dtype=float) / self.C), axis=-1)


# -- phi: R+^{|n| x |n|} -> R, bounded ---------------------------------------

class PhiClipEntry(Family):
    """``min(R[i, j], C)`` for one matrix entry."""

    name, slot = "clip_min_entry", "phi"

    def __init__(self, **params):
        super().__init__(**params)
        self.C = self._positive("C")
        self.i = int(params.get("i", 0))
        self.j = int(params.get("j", 1))

    @property
    def entry(self):
        return self.i, self.j

    def check_arity(self, m, size):
        if not (0 <= self.i < size and 0 <= self.j < size):
            raise InvalidSpec(f"phi entry ({self.i},{self.j}) outside a {size}x{size} matrix")

    def __call__(self, R):
        return np.minimum(R[..., self.i, self.j], self.C)


class PhiClipPoly(Family):
    """``clip(sum_t c_t R[i_t, j_t]^p_t, -C, C)``; terms are ``[c, i, j, p]``."""

    name, slot = "clip_poly", "phi"

    def __init__(self, **params):
        super().__init__(**params)
        self.C = self._positive("C")
        try:
            self.terms = [(float(c), int(i), int(j), int(p)) for c, i, j, p in params.get("terms", [])]
        except (TypeError, ValueError):
            raise InvalidSpec("clip_poly terms must be [coef, i, j, power] lists") from None
        if not self.terms:
            raise InvalidSpec("clip_poly needs at least one term")
        if any(p < 0 for *_, p in self.terms):
            raise InvalidSpec("clip_poly powers must be nonnegative")

    def check_arity(self, m, size):
        for _, i, j, _ in self.terms:
            if not (0 <= i < size and 0 <= j < size):
                raise InvalidSpec(f"phi term entry ({i},{j}) outside a {size}x{size} matrix")

    def __call__(self, R):
        total = 0.0
        for c, i, j, p in self.terms:
            total = total + c * R[..., i, j] ** p
        return np.clip(total, -self.C, self.C)


class PhiExp(Family):
    """``exp(-sum_ij lambda_ij R_ij)`` with a nonnegative scalar or matrix ``lambda``."""

    name, slot = "exp", "phi"

    def __init__(self, **params):
        super().__init__(**params)
        lam = np.asarray(params.get("lambda", 1.0), dtype=float)
        if not np.all(np.isfinite(lam)) or np.any(lam < 0):
            raise InvalidSpec("exp phi needs nonnegative finite lambda")
        self.lam = lam

    def check_arity(self, m, size):
        if self.lam.ndim and self.lam.shape != (size, size):
            raise InvalidSpec(f"lambda has shape {self.lam.shape}, expected {(size, size)}")

    def __call__(self, R):
        if self.lam.ndim:
            s = np.einsum("...ij,ij->...", R, self.lam)
        else:
            s = self.lam * R.sum(axis=(-2, -1))
        return np.exp(-s)


class PhiConstant(Family):
    name, slot = "constant", "phi"

    def __init__(self, **params):
        super().__init__(**params)
        v = float(params.get("value", 1.0))
        if not np.isfinite(v):
            raise InvalidSpec("constant phi must be finite")
        self.value = v

    def __call__(self, R):
        return np.full(R.shape[:-2], self.value)


REGISTRY = {
    "chi": {c.name: c for c in (ChiClip, ChiTanh, ChiPowerClip)},
    "psi": {c.name: c for c in (PsiClipProduct, PsiTanhProduct)},
    "phi": {c.name: c for c in (PhiClipEntry, PhiClipPoly, PhiExp, PhiConstant)},
}


def build(slot: str, desc):
    """Turn a descriptor dict into a family instance; callables pass through."""
    if desc is None or callable(desc):
        return desc
    if not isinstance(desc, dict) or "family" not in desc:
        raise InvalidSpec(f"{slot} descriptor must be a dict with a 'family' key, got {desc!r}")
    params = {k: v for k, v in desc.items() if k != "family"}
    try:
        cls = REGISTRY[slot][desc["family"]]
    except KeyError:
        raise InvalidSpec(f"unknown {slot} family {desc['family']!r}") from None
    return cls(**params)
