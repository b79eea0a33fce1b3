"""Batched evaluation of the joint latent class log-likelihood.

Per subject and class the log joint density splits into components: the
class-membership prior, one Gaussian factor per latent dimension, and the
survival factor (plus the survival at entry for delayed entry). The Gaussian
factor uses the low-rank identity (evaluated in :mod:`jlcm._kernels`)

    log|V| = log|Sigma| + log|I + U Z'Sigma^-1 Z U'|
    r'V^-1 r = r'Sigma^-1 r - v'(I + U Z'Sigma^-1 Z U')^-1 v,  v = U Z'Sigma^-1 r

with ``B = U'U``, so only ``q x q`` systems are solved and a singular ``B`` is
fine.

:class:`LikelihoodEngine` caches the components at its last full evaluation;
a call at a point that differs only in parameters of some components
recomputes just those. Finite-difference stencils hit that path almost always.
"""

from __future__ import annotations

import numpy as np

from ._kernels import gaussian_terms
from .data import Bases, Dataset, build_designs, resolve_bases
from .model import ModelSpec
from .params import ModelParams, ParameterLayout
from .splines import ispline_matrix, mspline_matrix
from .optim import NonFiniteObjective, OptimizerSettings
from .survival import DegenerateLikelihood

LOG_2PI = np.log(2 * np.pi)


def logsumexp(a: np.ndarray, axis: int = 1, keepdims: bool = False) -> np.ndarray:
    """Row-wise log-sum-exp; rows that are entirely ``-inf`` give ``-inf``."""
    m = a.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(a - m).sum(axis=axis, keepdims=True)) + m
    return out if keepdims else np.squeeze(out, axis=axis)


class _DimData:
    def __init__(self, dim_id, spec: ModelSpec, designs, bases: Bases):
        self.id = dim_id
        rows, X, Z, y, kk, subj = [], [], [], [], [], []
        for i, sd in enumerate(designs):
            dd = sd.dims.get(dim_id)
            if dd is None:
                continue
            rows.append(i)
            X.append(dd.X)
            Z.append(dd.Z)
            y.append(dd.values)
            kk.append(dd.marker_index)
            subj.append(np.full(dd.values.size, len(rows) - 1))
        self.rows = np.array(rows, dtype=int)
        self.present = self.rows.size > 0
        if not self.present:
            return
        self.X = np.vstack(X)
        self.Z = np.vstack(Z)
        self.y = np.concatenate(y)
        self.kk = np.concatenate(kk)
        subj = np.concatenate(subj)
        self.starts = np.r_[0, np.flatnonzero(np.diff(subj)) + 1]
        self.bounds = np.r_[self.starts, subj.size].astype(np.int64)
        self.n_i = np.diff(np.r_[self.starts, subj.size])
        self.q = self.Z.shape[1]
        self.markers = sorted(set(self.kk.tolist()))
        # per-subject observation counts per marker, for sums of log sigma^2 and constant Jacobians
        self.counts = np.zeros((self.rows.size, len(spec.markers)))
        np.add.at(self.counts, (subj, self.kk), 1.0)
        self.link_kind = {}
        self.pos = {}
        self.ibasis = {}
        self.mbasis = {}
        for k in self.markers:
            m = spec.markers[k]
            self.link_kind[k] = m.link
            self.pos[k] = np.flatnonzero(self.kk == k)
            if m.link == "isplines":
                vals = self.y[self.pos[k]]
                self.ibasis[k] = ispline_matrix(vals, bases.links[m.id])
                self.mbasis[k] = mspline_matrix(vals, bases.links[m.id])
        self.spline_markers = [k for k in self.markers if self.link_kind[k] == "isplines"]
        self.const = -0.5 * self.n_i * LOG_2PI


class LikelihoodEngine:
    """Log-likelihood of a dataset under one model, as a function of the packed
    parameter vector."""

    def __init__(self, ds: Dataset, spec: ModelSpec, bases: Bases | None = None,
                 layout: ParameterLayout | None = None):
        self.ds = ds
        self.spec = spec
        self.bases = bases if bases is not None else resolve_bases(ds, spec)
        self.layout = layout if layout is not None else ParameterLayout(spec, self.bases)
        designs = build_designs(ds, spec)
        self.designs = designs
        self.N = len(designs)
        self.G = spec.G
        self.ids = [sd.id for sd in designs]
        self.XC = np.column_stack([np.ones(self.N)] + [np.array([sd.XC[c] for sd in designs])
                                                       for c in range(len(spec.class_membership))])
        self.XT = np.array([sd.XT for sd in designs]).reshape(self.N, len(spec.hazard.covariates))
        self.T0 = np.array([sd.entry for sd in designs])
        self.T = np.array([sd.time for sd in designs])
        self.cause = np.array([sd.cause for sd in designs])
        self.truncated = bool(np.any(self.T0 > 0))
        self.logT = np.log(self.T)
        with np.errstate(divide="ignore"):
            self.logT0 = np.log(self.T0)
        self.dims = [_DimData(d.id, spec, designs, self.bases) for d in spec.dimensions]
        if spec.hazard.family == "msplines":
            hb = self.bases.hazard
            self.M_T = mspline_matrix(self.T, hb)
            self.I_T = ispline_matrix(self.T, hb, clamp=True)
            self.I_T0 = ispline_matrix(self.T0, hb, clamp=True)
        self.event_masks = [self.cause == l + 1 for l in range(spec.L)]
        self._base_theta = None
        self._base_comps = None
        self.n_evals = 0

    # -- components ---------------------------------------------------------
    def prior_component(self, P: ModelParams) -> np.ndarray:
        z = self.XC @ P.xi.T
        return z - logsumexp(z, axis=1, keepdims=True)

    def dimension_component(self, di: int, P: ModelParams) -> np.ndarray:
        out = np.zeros((self.N, self.G))
        dd = self.dims[di]
        if not dd.present:
            return out
        d = dd.id
        sig2 = P.sigma ** 2
        h = np.empty_like(dd.y)
        logjac = np.zeros(dd.rows.size)
        const_logjac = np.zeros(len(self.spec.markers))
        for k in dd.markers:
            pos = dd.pos[k]
            kind = dd.link_kind[k]
            if kind == "identity":
                h[pos] = dd.y[pos]
            elif kind == "linear":
                a = P.link_coef[k][0]
                h[pos] = P.link_intercept[k] + a * dd.y[pos]
                with np.errstate(divide="ignore"):
                    const_logjac[k] = np.log(a)
            else:
                w = P.link_coef[k]
                h[pos] = P.link_intercept[k] + dd.ibasis[k] @ w
        if dd.spline_markers:
            lj = np.zeros_like(dd.y)
            for k in dd.spline_markers:
                with np.errstate(divide="ignore"):
                    lj[dd.pos[k]] = np.log(dd.mbasis[k] @ P.link_coef[k])
            logjac += np.add.reduceat(lj, dd.starts)
        with np.errstate(divide="ignore"):
            logsig = np.log(sig2)
        logjac += dd.counts @ const_logjac
        wobs = 1.0 / sig2[dd.kk]
        r = h[:, None] - dd.X @ P.beta[d]                      # (n, G)
        quad = gaussian_terms(dd.bounds, r, wobs, dd.Z, np.ascontiguousarray(P.chol[d]))
        if not np.all(np.isfinite(quad)):
            raise np.linalg.LinAlgError(f"non-finite Gaussian term in dimension {d}")
        sum_logsig = dd.counts @ logsig
        vals = dd.const[:, None] - 0.5 * (sum_logsig[:, None] + quad) + logjac[:, None]
        out[dd.rows] = vals
        return out

    def survival_components(self, P: ModelParams) -> tuple[np.ndarray, np.ndarray]:
        N, G = self.N, self.G
        event = np.zeros((N, G))
        trunc = np.zeros((N, G))
        hz = self.spec.hazard
        for l in range(hz.causes):
            base = P.hazard_base[l]                            # (G, nb)
            lp = np.broadcast_to(P.hazard_logmult[l][None, :], (N, G))
            if self.XT.shape[1]:
                lp = lp + self.XT @ P.delta[l]
            elp = np.exp(lp)
            ev = self.event_masks[l]
            if hz.family == "weibull":
                scale, shape = base[:, 0], base[:, 1]
                ls = np.log(scale)
                with np.errstate(over="ignore"):       # overflow means a zero survival term
                    cum_T = np.exp(shape * (ls + self.logT[:, None]))
                    cum_T0 = np.exp(shape * (ls + self.logT0[:, None])) if self.truncated else None
                if ev.any():
                    event[ev] += ls + np.log(shape) + (shape - 1.0) * (ls + self.logT[ev, None]) + lp[ev]
            else:
                cum_T = self.I_T @ base.T
                cum_T0 = self.I_T0 @ base.T if self.truncated else None
                if ev.any():
                    with np.errstate(divide="ignore"):
                        event[ev] += np.log(self.M_T[ev] @ base.T) + lp[ev]
            event -= cum_T * elp
            if cum_T0 is not None:
                trunc -= cum_T0 * elp
        return event, trunc

    def components(self, theta: np.ndarray, which=None) -> dict:
        P = self.layout.unpack(theta)
        n_dim = len(self.dims)
        which = range(self.layout.n_components) if which is None else which
        out = {}
        for c in which:
            if c == 0:
                out[0] = self.prior_component(P)
            elif c <= n_dim:
                out[c] = self.dimension_component(c - 1, P)
            else:
                out[c] = self.survival_components(P)
        return out

    def _combine(self, comps: dict) -> np.ndarray:
        n_dim = len(self.dims)
        prior = comps[0]
        event, trunc = comps[n_dim + 1]
        joint = prior + event
        for c in range(1, n_dim + 1):
            joint = joint + comps[c]
        with np.errstate(invalid="ignore"):
            ll = logsumexp(joint, axis=1)
            if self.truncated:
                ll = ll - logsumexp(prior + trunc, axis=1)
        return ll

    # -- public evaluation --------------------------------------------------
    def subject_loglik(self, theta: np.ndarray) -> np.ndarray:
        with np.errstate(over="ignore", invalid="ignore"):
            return self._combine(self.components(theta))

    def joint_terms(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """``(log prior, log f(Y, T, d | g), log S(T0 | g))``, each ``(N, G)``."""
        comps = self.components(theta)
        n_dim = len(self.dims)
        event, trunc = comps[n_dim + 1]
        dens = event.copy()
        for c in range(1, n_dim + 1):
            dens += comps[c]
        return comps[0], dens, trunc

    def posterior(self, theta: np.ndarray) -> np.ndarray:
        prior, dens, _ = self.joint_terms(theta)
        joint = prior + dens
        bad = ~np.isfinite(logsumexp(joint, axis=1))
        if bad.any():
            raise DegenerateLikelihood(f"subject {self.ids[int(np.flatnonzero(bad)[0])]}: all class terms vanish")
        return np.exp(joint - logsumexp(joint, axis=1, keepdims=True))

    def total_loglik(self, theta: np.ndarray) -> float:
        """Sum over subjects; raises naming the first degenerate subject."""
        ll = self.subject_loglik(theta)
        bad = ~np.isfinite(ll)
        if bad.any():
            raise DegenerateLikelihood(f"subject {self.ids[int(np.flatnonzero(bad)[0])]}: "
                                       "likelihood underflows in every class")
        return float(ll.sum())

    def __call__(self, theta: np.ndarray) -> float:
        """Objective for the optimizer: total log-likelihood, ``-inf`` when degenerate."""
        theta = np.asarray(theta, dtype=float)
        self.n_evals += 1
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            try:
                if self._base_theta is not None and theta.shape == self._base_theta.shape:
                    diff = np.flatnonzero(theta != self._base_theta)
                    if diff.size == 0:
                        return self._base_value
                    touched = np.unique(self.layout.component_of[diff])
                    if touched.size < self.layout.n_components:
                        comps = dict(self._base_comps)
                        comps.update(self.components(theta, touched))
                        return self._finish(self._combine(comps))
                comps = self.components(theta)
                value = self._finish(self._combine(comps))
            except np.linalg.LinAlgError:
                return -np.inf
        self._base_theta = theta.copy()
        self._base_comps = comps
        self._base_value = value
        return value

    # -- finite-difference derivatives ---------------------------------------
    def _split(self, comps: dict) -> tuple[np.ndarray, np.ndarray | None]:
        n_dim = len(self.dims)
        event, trunc = comps[n_dim + 1]
        J = comps[0] + event
        for c in range(1, n_dim + 1):
            J = J + comps[c]
        K = comps[0] + trunc if self.truncated else None
        return J, K

    def _delta(self, base: dict, c: int, new) -> tuple[np.ndarray, np.ndarray | None]:
        """Change of the joint (J) and entry (K) log terms when component ``c`` is replaced."""
        n_dim = len(self.dims)
        zero = None if not self.truncated else np.zeros((self.N, self.G))
        with np.errstate(invalid="ignore"):
            if c == 0:
                dJ = new - base[0]
                dK = dJ if self.truncated else None
            elif c <= n_dim:
                dJ, dK = new - base[c], zero
            else:
                dJ = new[0] - base[c][0]
                dK = new[1] - base[c][1] if self.truncated else None
        # classes already at -inf carry no weight; keep them out of the arithmetic
        dJ = np.where(np.isfinite(dJ), dJ, np.where(np.isneginf(new if c <= n_dim else new[0]), -np.inf, 0.0))
        if dK is not None:
            dK = np.where(np.isfinite(dK), dK, 0.0)
        return dJ, dK

    def derivatives(self, theta: np.ndarray, settings: OptimizerSettings | None = None):
        """Central-difference gradient and Hessian of the total log-likelihood.

        Same stencil as :func:`jlcm.optim.numeric_derivatives`, evaluated
        structurally: each one-parameter perturbation recomputes only its own
        component, and a two-parameter perturbation whose parts touch
        different components (or different class columns of one component)
        is assembled from the two single perturbations without re-evaluating
        anything. Differences are accumulated per subject as log ratios,
        ``log sum_g w_ig exp(D_ig)``, with ``w`` the posterior weights at the
        centre.
        """
        settings = settings or OptimizerSettings()
        theta = np.asarray(theta, dtype=float)
        p = theta.size
        h = settings.steps(theta)
        lay = self.layout
        comp_of = lay.component_of
        cls_of = lay.class_of
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            try:
                base = self.components(theta)
            except np.linalg.LinAlgError:
                raise NonFiniteObjective("objective not finite at the evaluation point") from None
            J0, K0 = self._split(base)
            lJ = logsumexp(J0, axis=1)
            if not np.all(np.isfinite(lJ)):
                raise NonFiniteObjective("objective not finite at the evaluation point")
            wJ = np.exp(J0 - lJ[:, None])
            wK = None
            if K0 is not None:
                lK = logsumexp(K0, axis=1)
                wK = np.exp(K0 - lK[:, None])

            def value(dJ, dK):
                v = np.log(np.einsum("ng,ng->n", wJ, np.exp(dJ))).sum()
                if dK is not None:
                    v -= np.log(np.einsum("ng,ng->n", wK, np.exp(dK))).sum()
                return v

            def single(j, mult):
                t = theta.copy()
                t[j] += mult * h[j]
                c = int(comp_of[j])
                try:
                    new = self.components(t, [c])[c]
                except np.linalg.LinAlgError:
                    raise NonFiniteObjective(f"objective not finite when perturbing parameter {j}", j) from None
                return self._delta(base, c, new)

            EJ = np.empty((2 * p, self.N, self.G))
            EK = np.empty((2 * p, self.N, self.G)) if self.truncated else None
            g = np.empty(p)
            H = np.empty((p, p))
            for j in range(p):
                fs = []
                for a, mult in enumerate((1, -1)):
                    dJ, dK = single(j, mult)
                    EJ[2 * j + a] = np.exp(dJ)
                    if EK is not None:
                        EK[2 * j + a] = np.exp(dK)
                    fs.append(value(dJ, dK))
                g[j] = (fs[0] - fs[1]) / (2 * h[j])
                f2p = value(*single(j, 2))
                f2m = value(*single(j, -2))
                H[j, j] = (f2p + f2m) / (4 * h[j] * h[j])
                if not np.isfinite([fs[0], fs[1], f2p, f2m]).all():
                    raise NonFiniteObjective(f"objective not finite when perturbing parameter {j}", j)

            F = self._pair_values(EJ, wJ)
            if EK is not None:
                F -= self._pair_values(EK, wK)
            signs = (1, -1)
            for i in range(p):
                for j in range(i):
                    ci, cj = comp_of[i], comp_of[j]
                    separable = ci != cj or (ci != 0 and cls_of[i] >= 0 and cls_of[j] >= 0
                                             and cls_of[i] != cls_of[j])
                    f = np.empty((2, 2))
                    for a, si in enumerate(signs):
                        for b, sj in enumerate(signs):
                            if separable:
                                f[a, b] = F[2 * i + a, 2 * j + b]
                            else:
                                t = theta.copy()
                                t[i] += si * h[i]
                                t[j] += sj * h[j]
                                c = int(ci)
                                try:
                                    new = self.components(t, [c])[c]
                                except np.linalg.LinAlgError:
                                    raise NonFiniteObjective(
                                        f"objective not finite when perturbing parameter {i}", i) from None
                                f[a, b] = value(*self._delta(base, c, new))
                    if not np.isfinite(f).all():
                        raise NonFiniteObjective(f"objective not finite when perturbing parameter {i}", i)
                    H[i, j] = H[j, i] = (f[0, 0] - f[0, 1] - f[1, 0] + f[1, 1]) / (4 * h[i] * h[j])
        return g, 0.5 * (H + H.T)

    @staticmethod
    def _pair_values(E: np.ndarray, w: np.ndarray, chunk_elems: int = 4_000_000) -> np.ndarray:
        """``F[a, b] = sum_n log sum_g w_ng E_a,ng E_b,ng`` in subject chunks."""
        m, N, G = E.shape
        F = np.zeros((m, m))
        step = max(1, chunk_elems // max(1, m * m))
        for s in range(0, N, step):
            A = np.transpose(E[:, s:s + step] * np.sqrt(w[None, s:s + step]), (1, 0, 2))   # (n, m, G)
            S = A @ np.transpose(A, (0, 2, 1))
            F += np.log(S).sum(axis=0)
        return F

    @staticmethod
    def _finish(ll: np.ndarray) -> float:
        total = float(ll.sum())
        return total if np.isfinite(total) else -np.inf


def class_membership_probs(xi: np.ndarray, XC=None) -> np.ndarray:
    """Softmax class probabilities; ``xi`` is ``(G, 1 + n_cov)`` with the last
    row the reference class (forced to zero here)."""
    xi = np.array(xi, dtype=float, ndmin=2)
    xi[-1] = 0.0
    x = np.r_[1.0, np.asarray(XC if XC is not None else [], dtype=float)]
    z = xi @ x
    z -= z.max()
    e = np.exp(z)
    return e / e.sum()
