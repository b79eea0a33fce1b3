"""Packing of the full parameter vector.

Block order is ``[xi | beta | chol | sigma | eta | zeta | delta]``:

* ``xi``: class-membership intercept and covariate coefficients for classes
  ``1..G-1`` (class ``G`` is the reference, fixed at 0).
* ``beta``: fixed effects per dimension, one entry per class for
  class-specific terms and one shared entry otherwise. In dimensions without
  an identity-linked marker the reference-class intercept is fixed at 0.
* ``chol``: upper-triangular Cholesky factor ``U`` of each dimension's
  random-effect covariance ``B = U'U`` (shared across classes by default).
* ``sigma``: marker error standard deviations, stored as a signed value and
  used through ``abs``. The first marker of a constrained dimension is fixed
  at 1 unless the dispersion constraint is put on ``B[0, 0]``.
* ``eta``: link parameters, intercept then squared slope / I-spline weights.
* ``zeta``: baseline hazard parameters per cause (Weibull scale and shape, or
  M-spline weights, all squared), per class or shared with log-multipliers.
* ``delta``: hazard covariate effects per cause.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import Bases
from .model import ModelSpec
from .splines import LinkFunction

ID, SQ, ABS = 0, 1, 2


@dataclass
class Section:
    offset: int
    shape: tuple[int, ...]

    def __post_init__(self):
        self.size = int(np.prod(self.shape))


@dataclass
class ModelParams:
    """Natural-scale parameters, as views into one flat array."""

    xi: np.ndarray                    # (G, 1 + n_class_covariates)
    beta: dict[str, np.ndarray]       # dim -> (n_fixed, G)
    chol: dict[str, np.ndarray]       # dim -> (G, q, q), upper triangular
    sigma: np.ndarray                 # (K,)
    link_intercept: np.ndarray        # (K,)
    link_coef: list[np.ndarray]       # per marker
    hazard_base: list[np.ndarray]     # per cause, (G, n_base)
    hazard_logmult: np.ndarray        # (L, G)
    delta: np.ndarray                 # (L, n_hazard_covariates, G)

    def class_proportions(self, XC: np.ndarray | None = None) -> np.ndarray:
        x = np.ones(1) if XC is None else np.r_[1.0, XC]
        z = self.xi @ x
        z = z - z.max()
        return np.exp(z) / np.exp(z).sum()

    def covariance(self, dim: str, g: int = 0) -> np.ndarray:
        U = self.chol[dim][g]
        return U.T @ U


class ParameterLayout:
    def __init__(self, spec: ModelSpec, bases: Bases):
        self.spec = spec
        self.bases = bases
        G = spec.G
        self.G = G
        self.dim_ids = [d.id for d in spec.dimensions]
        self.n_components = len(self.dim_ids) + 2   # prior, dims..., survival
        nat_sections: dict[str, Section] = {}
        self._nat_size = 0

        def section(key, shape):
            s = Section(self._nat_size, tuple(shape))
            nat_sections[key] = s
            self._nat_size += s.size
            return s

        names: list[str] = []
        component: list[int] = []
        src: list[int] = []
        tgt: list[int] = []
        kind: list[int] = []
        fixed_vals: list[tuple[int, float]] = []
        class_of: list[int] = []   # -1 when shared across classes

        def param(name, comp, targets, k=ID, g=-1):
            j = len(names)
            names.append(name)
            component.append(comp)
            class_of.append(g)
            for t in targets:
                src.append(j)
                tgt.append(t)
                kind.append(k)

        nC = 1 + len(spec.class_membership)
        cm_names = ["intercept"] + list(spec.class_membership)
        s = section("xi", (G, nC))
        for g in range(G - 1):
            for c in range(nC):
                param(f"xi[class{g + 1}].{cm_names[c]}", 0, [s.offset + g * nC + c], g=g)

        self.fixed_terms: dict[str, list[str]] = {}
        for di, d in enumerate(spec.dimensions):
            comp = 1 + di
            terms = list(d.mean_terms)
            cs = set(d.class_specific) | set(terms[len(d.fixed):])
            self.fixed_terms[d.id] = terms
            s = section(f"beta:{d.id}", (len(terms), G))
            constrained = spec.dimension_constrained(d.id)
            for ti, term in enumerate(terms):
                base = s.offset + ti * G
                if term in cs:
                    for g in range(G):
                        if constrained and term == "1" and g == G - 1:
                            fixed_vals.append((base + g, 0.0))
                            continue
                        param(f"beta[{d.id}].{term}[class{g + 1}]", comp, [base + g], g=g)
                else:
                    if constrained and term == "1":
                        fixed_vals.extend((base + g, 0.0) for g in range(G))
                        continue
                    param(f"beta[{d.id}].{term}", comp, [base + g for g in range(G)])

        for di, d in enumerate(spec.dimensions):
            comp = 1 + di
            q = len(d.random)
            s = section(f"chol:{d.id}", (G, q, q))
            fix_first = spec.dimension_constrained(d.id) and d.dispersion_constraint == "random"
            blocks = range(G) if d.random_class_specific else [None]
            for g in blocks:
                for a in range(q):
                    for b in range(a, q):
                        cls = list(range(G)) if g is None else [g]
                        targets = [s.offset + c * q * q + a * q + b for c in cls]
                        if fix_first and a == 0 and b == 0:
                            fixed_vals.extend((t, 1.0) for t in targets)
                            continue
                        suffix = "" if g is None else f"[class{g + 1}]"
                        param(f"chol[{d.id}][{a},{b}]{suffix}", comp, targets, g=-1 if g is None else g)

        K = len(spec.markers)
        s_sigma = section("sigma", (K,))
        s_int = section("link_intercept", (K,))
        self._link_sections = []
        dim_index = {d: i for i, d in enumerate(self.dim_ids)}
        first_marker = {}
        for k, m in enumerate(spec.markers):
            first_marker.setdefault(m.dimension, k)
        for k, m in enumerate(spec.markers):
            comp = 1 + dim_index[m.dimension]
            d = spec.dimensions[dim_index[m.dimension]]
            if (spec.dimension_constrained(m.dimension) and d.dispersion_constraint == "sigma"
                    and first_marker[m.dimension] == k):
                fixed_vals.append((s_sigma.offset + k, 1.0))
            else:
                param(f"sigma[{m.id}]", comp, [s_sigma.offset + k], ABS)
        for k, m in enumerate(spec.markers):
            comp = 1 + dim_index[m.dimension]
            if m.link == "identity":
                self._link_sections.append(section(f"link:{m.id}", (0,)))
                continue
            nb = 1 if m.link == "linear" else bases.links[m.id].n_basis
            s = section(f"link:{m.id}", (nb,))
            self._link_sections.append(s)
            param(f"eta[{m.id}].intercept", comp, [s_int.offset + k])
            for b in range(nb):
                label = "slope" if m.link == "linear" else f"w{b + 1}"
                param(f"eta[{m.id}].{label}", comp, [s.offset + b], SQ)

        hz = spec.hazard
        L = hz.causes
        comp_s = self.n_components - 1
        nbase = 2 if hz.family == "weibull" else bases.hazard.n_basis
        base_labels = ["scale", "shape"] if hz.family == "weibull" else [f"w{b + 1}" for b in range(nbase)]
        self._hazard_sections = []
        for l in range(L):
            s = section(f"hazard:{l}", (G, nbase))
            self._hazard_sections.append(s)
            if hz.baseline == "class-specific":
                for g in range(G):
                    for b in range(nbase):
                        param(f"zeta[cause{l + 1}].{base_labels[b]}[class{g + 1}]", comp_s,
                              [s.offset + g * nbase + b], SQ, g=g)
            else:
                for b in range(nbase):
                    param(f"zeta[cause{l + 1}].{base_labels[b]}", comp_s,
                          [s.offset + g * nbase + b for g in range(G)], SQ)
        s_lm = section("hazard_logmult", (L, G))
        if hz.baseline == "proportional":
            for l in range(L):
                for g in range(G - 1):
                    param(f"zeta[cause{l + 1}].logmult[class{g + 1}]", comp_s, [s_lm.offset + l * G + g], g=g)
        nT = len(hz.covariates)
        s_d = section("delta", (L, nT, G))
        for l in range(L):
            for c, cov in enumerate(hz.covariates):
                base = s_d.offset + l * nT * G + c * G
                if cov.class_specific:
                    for g in range(G):
                        param(f"delta[cause{l + 1}].{cov.name}[class{g + 1}]", comp_s, [base + g], g=g)
                else:
                    param(f"delta[cause{l + 1}].{cov.name}", comp_s, [base + g for g in range(G)])

        self.names = names
        self.p = len(names)
        self.component_of = np.array(component, dtype=int)
        self.class_of = np.array(class_of, dtype=int)
        self._src = np.array(src, dtype=int)
        self._tgt = np.array(tgt, dtype=int)
        self._kind = np.array(kind, dtype=int)
        self._fixed = np.zeros(self._nat_size)
        for t, v in fixed_vals:
            self._fixed[t] = v
        self._sections = nat_sections
        self._sq = self._kind == SQ
        self._abs = self._kind == ABS
        # first target of each parameter, used when packing
        first = np.full(self.p, -1)
        kinds = np.zeros(self.p, dtype=int)
        for sj, tj, kj in zip(src[::-1], tgt[::-1], kind[::-1]):
            first[sj] = tj
            kinds[sj] = kj
        self._first_target = first
        self._param_kind = kinds

    # -- index helpers ----------------------------------------------------
    def index(self, name: str) -> int:
        return self.names.index(name)

    def block(self, prefix: str) -> np.ndarray:
        return np.array([j for j, n in enumerate(self.names) if n.startswith(prefix)], dtype=int)

    def class_specific_mask(self) -> np.ndarray:
        return self.class_of >= 0

    # -- conversions ------------------------------------------------------
    def natural_flat(self, theta: np.ndarray) -> np.ndarray:
        vals = np.asarray(theta, dtype=float)[self._src]
        vals = np.where(self._sq, vals * vals, vals)
        vals = np.where(self._abs, np.abs(vals), vals)
        nat = self._fixed.copy()
        nat[self._tgt] = vals
        return nat

    def _view(self, nat, key):
        s = self._sections[key]
        return nat[s.offset:s.offset + s.size].reshape(s.shape)

    def unpack(self, theta: np.ndarray) -> ModelParams:
        nat = self.natural_flat(theta)
        spec = self.spec
        return ModelParams(
            xi=self._view(nat, "xi"),
            beta={d: self._view(nat, f"beta:{d}") for d in self.dim_ids},
            chol={d: self._view(nat, f"chol:{d}") for d in self.dim_ids},
            sigma=self._view(nat, "sigma"),
            link_intercept=self._view(nat, "link_intercept"),
            link_coef=[self._view(nat, f"link:{m.id}") for m in spec.markers],
            hazard_base=[self._view(nat, f"hazard:{l}") for l in range(spec.L)],
            hazard_logmult=self._view(nat, "hazard_logmult"),
            delta=self._view(nat, "delta"),
        )

    def pack(self, params: ModelParams) -> np.ndarray:
        """Inverse of :meth:`unpack` choosing nonnegative roots and Cholesky
        factors with nonnegative diagonals."""
        nat = self._fixed.copy()
        items = [("xi", params.xi), ("sigma", params.sigma), ("link_intercept", params.link_intercept),
                 ("hazard_logmult", params.hazard_logmult), ("delta", params.delta)]
        items += [(f"beta:{d}", params.beta[d]) for d in self.dim_ids]
        for d in self.dim_ids:
            U = np.array(params.chol[d], dtype=float)
            signs = np.sign(np.diagonal(U, axis1=1, axis2=2))
            signs[signs == 0] = 1.0
            items.append((f"chol:{d}", U * signs[:, :, None]))
        items += [(f"link:{m.id}", params.link_coef[k]) for k, m in enumerate(self.spec.markers)]
        items += [(f"hazard:{l}", params.hazard_base[l]) for l in range(self.spec.L)]
        for key, arr in items:
            s = self._sections[key]
            nat[s.offset:s.offset + s.size] = np.asarray(arr, dtype=float).ravel()
        vals = nat[self._first_target]
        vals = np.where(self._param_kind == SQ, np.sqrt(np.abs(vals)), vals)
        vals = np.where(self._param_kind == ABS, np.abs(vals), vals)
        return vals

    def canonical(self, theta: np.ndarray) -> np.ndarray:
        return self.pack(self.unpack(theta))

    def links(self, params: ModelParams) -> list[LinkFunction]:
        out = []
        for k, m in enumerate(self.spec.markers):
            if m.link == "identity":
                out.append(LinkFunction("identity"))
            elif m.link == "linear":
                out.append(LinkFunction("linear", float(params.link_intercept[k]),
                                        (max(float(params.link_coef[k][0]), 1e-300),)))
            else:
                out.append(LinkFunction("isplines", float(params.link_intercept[k]),
                                        tuple(params.link_coef[k]), self.bases.links[m.id]))
        return out

    def permute_classes(self, theta: np.ndarray, perm) -> np.ndarray:
        """Relabel classes so that new class ``g`` is old class ``perm[g]``,
        renormalising every reference-class constraint."""
        perm = np.asarray(perm, dtype=int)
        P = self.unpack(theta)
        G = self.G
        ref = perm[G - 1]
        xi = P.xi[perm] - P.xi[ref]
        beta = {}
        link_int = P.link_intercept.copy()
        for d in self.dim_ids:
            b = P.beta[d][:, perm].copy()
            if self.spec.dimension_constrained(d):
                terms = self.fixed_terms[d]
                i0 = terms.index("1")
                shift = b[i0, G - 1]
                b[i0] -= shift
                for k, m in enumerate(self.spec.markers):
                    if m.dimension == d:
                        link_int[k] -= shift
            beta[d] = b
        chol = {d: P.chol[d][perm] for d in self.dim_ids}
        logmult = P.hazard_logmult[:, perm]
        shift = logmult[:, G - 1].copy()
        logmult = logmult - shift[:, None]
        bases = []
        for l, hb in enumerate(P.hazard_base):
            hb = hb[perm].copy()
            if self.spec.hazard.baseline == "proportional" and shift[l] != 0:
                if self.spec.hazard.family == "weibull":
                    hb[:, 0] = hb[:, 0] * np.exp(shift[l] / hb[:, 1])
                else:
                    hb = hb * np.exp(shift[l])
            bases.append(hb)
        new = ModelParams(xi=xi, beta=beta, chol=chol, sigma=P.sigma, link_intercept=link_int,
                          link_coef=P.link_coef, hazard_base=bases, hazard_logmult=logmult,
                          delta=P.delta[:, :, perm])
        return self.pack(new)

    def natural_table(self, theta: np.ndarray) -> list[tuple[str, float]]:
        """Human-readable derived quantities (proportions, covariances, sigmas)."""
        P = self.unpack(theta)
        rows = []
        if not self.spec.class_membership:
            for g, pg in enumerate(P.class_proportions()):
                rows.append((f"proportion[class{g + 1}]", float(pg)))
        for d in self.dim_ids:
            terms = self.spec.dimensions[self.dim_ids.index(d)].random
            gs = range(self.G) if self.spec.dimensions[self.dim_ids.index(d)].random_class_specific else [0]
            for g in gs:
                B = P.covariance(d, g)
                suffix = f"[class{g + 1}]" if len(gs) > 1 else ""
                for a in range(len(terms)):
                    for b in range(a, len(terms)):
                        rows.append((f"cov[{d}]({terms[a]},{terms[b]}){suffix}", float(B[a, b])))
        for k, m in enumerate(self.spec.markers):
            rows.append((f"sigma[{m.id}]", float(P.sigma[k])))
        return rows


def transform_covariance(fn, theta: np.ndarray, V: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Delta-method covariance of ``fn(theta)`` using a central-difference Jacobian."""
    theta = np.asarray(theta, dtype=float)
    base = np.asarray(fn(theta))
    J = np.empty((base.size, theta.size))
    for j in range(theta.size):
        step = h * max(1.0, abs(theta[j]))
        tp = theta.copy()
        tm = theta.copy()
        tp[j] += step
        tm[j] -= step
        J[:, j] = (np.asarray(fn(tp)) - np.asarray(fn(tm))) / (2 * step)
    return J @ V @ J.T
