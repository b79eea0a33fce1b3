"""Declarative model description and its YAML file format.

A model file looks like::

    spec_version: 1
    classes: 3
    class_membership: [sex]
    dimensions:
      - id: function
        fixed: ["1", time]
        class_specific: ["1", time]
        random: ["1", time]
    markers:
      - {id: umsars1, dimension: function, link: isplines, degree: 2, n_knots: 3}
      - {id: umsars2, dimension: function, link: linear}
    hazard:
      causes: 1
      family: weibull
      baseline: class-specific
      covariates: [{name: age, class_specific: false}]

Term strings are ``"1"``, ``time``, ``time^k``, a covariate name, or a product
of those joined by ``*`` (``time*sex``).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import yaml

SPEC_VERSION = 1

LINK_KINDS = ("identity", "linear", "isplines")
HAZARD_FAMILIES = ("weibull", "msplines")
BASELINE_MODES = ("class-specific", "proportional")


class SpecError(ValueError):
    pass


def term_factors(term: str) -> list[tuple[str, int]]:
    """Split a term into ``(name, power)`` factors; ``"1"`` has no factors."""
    term = term.replace(" ", "")
    if term in ("1", "intercept", ""):
        return []
    out = []
    for part in term.split("*"):
        name, _, power = part.partition("^")
        if not name:
            raise SpecError(f"malformed term {term!r}")
        out.append((name, int(power) if power else 1))
    return out


def term_covariates(term: str) -> set[str]:
    return {name for name, _ in term_factors(term) if name != "time"}


def canonical_term(term: str) -> str:
    return "1" if not term_factors(term) else term.replace(" ", "")


@dataclass(frozen=True)
class MarkerSpec:
    id: str
    dimension: str
    link: str = "identity"
    degree: int = 2
    n_knots: int = 3
    knots: tuple[float, ...] | None = None
    knot_placement: str = "quantile"
    range: tuple[float, float] | None = None

    def __post_init__(self):
        if self.link not in LINK_KINDS:
            raise SpecError(f"marker {self.id}: unknown link {self.link!r}")
        if self.knots is not None:
            object.__setattr__(self, "knots", tuple(float(k) for k in self.knots))
        if self.range is not None:
            lo, hi = (float(v) for v in self.range)
            if not lo < hi:
                raise SpecError(f"marker {self.id}: range must be increasing")
            object.__setattr__(self, "range", (lo, hi))


@dataclass(frozen=True)
class DimensionSpec:
    id: str
    fixed: tuple[str, ...] = ("1", "time")
    class_specific: tuple[str, ...] = ("1", "time")
    random: tuple[str, ...] = ("1",)
    random_class_specific: bool = False
    random_mean: bool = False
    dispersion_constraint: str = "sigma"

    def __post_init__(self):
        fixed = tuple(canonical_term(t) for t in self.fixed)
        if "1" not in fixed:
            fixed = ("1",) + fixed
        random = tuple(canonical_term(t) for t in self.random)
        if "1" not in random:
            random = ("1",) + random
        cs = tuple(canonical_term(t) for t in self.class_specific)
        unknown = set(cs) - set(fixed)
        if unknown:
            raise SpecError(f"dimension {self.id}: class-specific terms {sorted(unknown)} not in fixed terms")
        if self.dispersion_constraint not in ("sigma", "random"):
            raise SpecError(f"dimension {self.id}: dispersion_constraint must be 'sigma' or 'random'")
        if self.random_mean and set(random) <= set(fixed):
            raise SpecError(f"dimension {self.id}: random_mean requires random terms absent from the fixed terms")
        object.__setattr__(self, "fixed", fixed)
        object.__setattr__(self, "random", random)
        object.__setattr__(self, "class_specific", cs)

    @property
    def mean_terms(self) -> tuple[str, ...]:
        """Columns of the mean design: fixed terms, then (with ``random_mean``)
        the random terms not among them, which carry class-specific means."""
        if not self.random_mean:
            return self.fixed
        return self.fixed + tuple(t for t in self.random if t not in self.fixed)


@dataclass(frozen=True)
class HazardCovariate:
    name: str
    class_specific: bool = False


@dataclass(frozen=True)
class HazardSpec:
    causes: int = 1
    family: str = "weibull"
    baseline: str = "class-specific"
    n_knots: int = 3
    knots: tuple[float, ...] | None = None
    covariates: tuple[HazardCovariate, ...] = ()

    def __post_init__(self):
        if self.causes < 1:
            raise SpecError("hazard needs at least one cause")
        if self.family not in HAZARD_FAMILIES:
            raise SpecError(f"unknown hazard family {self.family!r}")
        if self.baseline not in BASELINE_MODES:
            raise SpecError(f"unknown baseline mode {self.baseline!r}")
        covs = tuple(c if isinstance(c, HazardCovariate) else HazardCovariate(**c) if isinstance(c, dict)
                     else HazardCovariate(str(c)) for c in self.covariates)
        object.__setattr__(self, "covariates", covs)
        if self.knots is not None:
            object.__setattr__(self, "knots", tuple(float(k) for k in self.knots))


@dataclass(frozen=True)
class ModelSpec:
    G: int
    markers: tuple[MarkerSpec, ...]
    dimensions: tuple[DimensionSpec, ...]
    hazard: HazardSpec = field(default_factory=HazardSpec)
    class_membership: tuple[str, ...] = ()

    def __post_init__(self):
        if self.G < 1:
            raise SpecError("number of classes must be >= 1")
        dims = [d.id for d in self.dimensions]
        if len(set(dims)) != len(dims):
            raise SpecError("duplicate dimension ids")
        ids = [m.id for m in self.markers]
        if len(set(ids)) != len(ids):
            raise SpecError("duplicate marker ids")
        for m in self.markers:
            if m.dimension not in dims:
                raise SpecError(f"marker {m.id} refers to unknown dimension {m.dimension!r}")
        for d in dims:
            if not any(m.dimension == d for m in self.markers):
                raise SpecError(f"dimension {d} has no markers")

    @property
    def L(self) -> int:
        return self.hazard.causes

    def with_classes(self, G: int) -> "ModelSpec":
        return replace(self, G=G)

    def markers_of(self, dim_id: str) -> list[MarkerSpec]:
        return [m for m in self.markers if m.dimension == dim_id]

    def dimension_constrained(self, dim_id: str) -> bool:
        """Whether the latent scale of a dimension needs location/dispersion
        constraints (no identity-linked marker pins it)."""
        return all(m.link != "identity" for m in self.markers_of(dim_id))

    def covariate_names(self) -> set[str]:
        names = set(self.class_membership)
        for d in self.dimensions:
            for t in d.fixed + d.random:
                names |= term_covariates(t)
        names |= {c.name for c in self.hazard.covariates}
        return names

    def to_dict(self) -> dict:
        out = {"spec_version": SPEC_VERSION, "classes": self.G,
               "class_membership": list(self.class_membership)}
        out["dimensions"] = [_clean(asdict(d)) for d in self.dimensions]
        out["markers"] = [_clean(asdict(m)) for m in self.markers]
        haz = _clean(asdict(self.hazard))
        out["hazard"] = haz
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "ModelSpec":
        version = data.get("spec_version")
        if version != SPEC_VERSION:
            raise SpecError(f"unsupported spec_version {version!r} (expected {SPEC_VERSION})")
        try:
            dims = tuple(DimensionSpec(**_tuples(d)) for d in data["dimensions"])
            markers = tuple(MarkerSpec(**_tuples(m)) for m in data["markers"])
            hazard = HazardSpec(**_tuples(data.get("hazard", {})))
            return cls(G=int(data.get("classes", 1)), markers=markers, dimensions=dims,
                       hazard=hazard, class_membership=tuple(data.get("class_membership", ()) or ()))
        except (KeyError, TypeError) as exc:
            raise SpecError(f"malformed model spec: {exc}") from exc


def _clean(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if v is None:
            continue
        if isinstance(v, tuple):
            v = [_clean(x) if isinstance(x, dict) else x for x in v]
        out[k] = v
    return out


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def load_model_spec(path) -> ModelSpec:
    path = Path(path)
    with path.open(encoding="utf-8") as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise SpecError(f"{path}: expected a mapping at top level")
    return ModelSpec.from_dict(data.get("model", data))


def dump_model_spec(spec: ModelSpec) -> str:
    return yaml.safe_dump(spec.to_dict(), sort_keys=False)
