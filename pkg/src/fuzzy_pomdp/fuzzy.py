"""Type-1 Takagi-Sugeno fuzzy model and inference.

A model is a set of IF-THEN rules over the observation components plus an
optional crisp action gate; consequents are affine functions of the
observation vector. Inference is the usual firing-strength-weighted average
of rule consequents, predicting the next observation.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

TNORMS = ("product", "minimum")
SHAPE_ARITY = {"triangular": 3, "trapezoidal": 4, "gaussian": 2}


class InferenceError(ValueError):
    """No rule fires for an input and no fallback is configured."""


def _set(obj, name, value):
    object.__setattr__(obj, name, value)


@dataclass(frozen=True)
class MembershipFunction:
    """One linguistic term: triangular(a,b,c), trapezoidal(a,b,c,d) or
    gaussian(center, sigma). Output is always within [0, 1]."""

    shape: str
    params: tuple[float, ...]

    def __post_init__(self):
        if self.shape not in SHAPE_ARITY:
            raise ValueError(f"unknown membership shape {self.shape!r}")
        params = tuple(float(p) for p in self.params)
        if len(params) != SHAPE_ARITY[self.shape]:
            raise ValueError(
                f"{self.shape} takes {SHAPE_ARITY[self.shape]} parameters, got {len(params)}"
            )
        if self.shape in ("triangular", "trapezoidal"):
            if any(b < a for a, b in zip(params, params[1:])):
                raise ValueError(f"{self.shape} breakpoints must be non-decreasing: {params}")
        elif params[1] <= 0:
            raise ValueError("gaussian sigma must be > 0")
        _set(self, "params", params)


def _ramp_up(x, lo, hi):
    # 0 at lo rising to 1 at hi; a vertical edge degenerates to a step
    if hi > lo:
        return np.clip((x - lo) / (hi - lo), 0.0, 1.0)
    return np.where(x >= lo, 1.0, 0.0)


def _ramp_down(x, lo, hi):
    if hi > lo:
        return np.clip((hi - x) / (hi - lo), 0.0, 1.0)
    return np.where(x <= hi, 1.0, 0.0)


def membership(mf: MembershipFunction, x):
    """Degree in [0, 1] to which x belongs to the term; vectorizes over x."""
    x = np.asarray(x, dtype=float)
    if mf.shape == "triangular":
        a, b, c = mf.params
        value = np.minimum(_ramp_up(x, a, b), _ramp_down(x, b, c))
    elif mf.shape == "trapezoidal":
        a, b, c, d = mf.params
        value = np.minimum(_ramp_up(x, a, b), _ramp_down(x, c, d))
    else:
        center, sigma = mf.params
        value = np.exp(-0.5 * ((x - center) / sigma) ** 2)
    return float(value) if value.ndim == 0 else value


@dataclass(frozen=True)
class FuzzyClause:
    """One antecedent condition: observation component `dim` is `term`."""

    dim: int
    term: MembershipFunction
    var_name: str = ""
    term_label: str = ""


@dataclass(frozen=True)
class FuzzyRule:
    """IF clauses (AND action = selector) THEN next_obs = consequent @ [1, obs].

    consequent has one affine coefficient row per output dimension:
    row j is (c0, c1, ..., cd) meaning c0 + sum_k ck * obs_k. A None action
    leaves the rule active for every action.
    """

    clauses: tuple[FuzzyClause, ...]
    consequent: np.ndarray
    action: int | None = None

    def __post_init__(self):
        clauses = tuple(self.clauses)
        dims = [c.dim for c in clauses]
        if len(set(dims)) != len(dims):
            raise ValueError("at most one clause per input slot")
        cons = np.array(self.consequent, dtype=float)
        if cons.ndim != 2:
            raise ValueError("consequent must be a (obs_dim, obs_dim+1) coefficient array")
        cons.flags.writeable = False
        _set(self, "clauses", clauses)
        _set(self, "consequent", cons)

    def predict(self, obs: np.ndarray) -> np.ndarray:
        """Affine consequent value for one observation vector."""
        return self.consequent[:, 0] + self.consequent[:, 1:] @ np.asarray(obs, dtype=float)


@dataclass(frozen=True)
class FuzzyVariable:
    """Input variable metadata: display name, term dictionary, value range."""

    name: str
    terms: dict[str, MembershipFunction] = field(default_factory=dict)
    range: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        lo, hi = self.range
        if not hi > lo:
            raise ValueError(f"variable {self.name!r} range must satisfy lo < hi")
        _set(self, "range", (float(lo), float(hi)))


@dataclass(frozen=True)
class FuzzyModel:
    """Rule base plus the t-norm used to combine clause memberships."""

    obs_dim: int
    num_actions: int
    rules: tuple[FuzzyRule, ...]
    tnorm: str = "product"
    variables: tuple[FuzzyVariable, ...] = ()

    def __post_init__(self):
        if self.tnorm not in TNORMS:
            raise ValueError(f"tnorm must be one of {TNORMS}")
        # an empty rule tuple is representable (inference always falls back);
        # file loading rejects it so shipped models stay meaningful
        rules = tuple(self.rules)
        for i, rule in enumerate(rules):
            if rule.consequent.shape != (self.obs_dim, self.obs_dim + 1):
                raise ValueError(
                    f"rule {i}: consequent shape {rule.consequent.shape}, "
                    f"expected {(self.obs_dim, self.obs_dim + 1)}"
                )
            for clause in rule.clauses:
                if not 0 <= clause.dim < self.obs_dim:
                    raise ValueError(f"rule {i}: clause dim {clause.dim} out of range")
            if rule.action is not None and not 0 <= rule.action < self.num_actions:
                raise ValueError(f"rule {i}: action {rule.action} out of range")
        variables = tuple(self.variables)
        if variables and len(variables) != self.obs_dim:
            raise ValueError("need one variable entry per observation dimension")
        _set(self, "rules", rules)
        _set(self, "variables", variables)

    @property
    def variable_ranges(self) -> np.ndarray:
        """(obs_dim, 2) array of per-variable value ranges, defaulting to [0, 1]."""
        if self.variables:
            return np.array([v.range for v in self.variables], dtype=float)
        return np.tile([0.0, 1.0], (self.obs_dim, 1))


def clause_memberships(rule: FuzzyRule, obs_batch: np.ndarray) -> np.ndarray:
    """Membership of every antecedent clause over a batch, shape (n, n_clauses)."""
    obs_batch = np.atleast_2d(np.asarray(obs_batch, dtype=float))
    if not rule.clauses:
        return np.ones((len(obs_batch), 0))
    return np.column_stack(
        [membership(c.term, obs_batch[:, c.dim]) for c in rule.clauses]
    )


def firing_strength(rule: FuzzyRule, obs, action: int, tnorm: str = "product") -> float:
    """t-norm aggregation of the rule's clause memberships for one input.

    A crisp action selector gates the result to 0 on mismatch; a rule with
    an empty antecedent fires at 1.
    """
    if rule.action is not None and rule.action != action:
        return 0.0
    if not rule.clauses:
        return 1.0
    values = clause_memberships(rule, np.atleast_2d(obs))[0]
    return float(np.prod(values) if tnorm == "product" else np.min(values))


def firing_strengths_batch(rule: FuzzyRule, obs_batch, action: int, tnorm: str) -> np.ndarray:
    """firing_strength vectorized over a batch of observations."""
    obs_batch = np.atleast_2d(np.asarray(obs_batch, dtype=float))
    if rule.action is not None and rule.action != action:
        return np.zeros(len(obs_batch))
    if not rule.clauses:
        return np.ones(len(obs_batch))
    values = clause_memberships(rule, obs_batch)
    return values.prod(axis=1) if tnorm == "product" else values.min(axis=1)


def infer(model: FuzzyModel, obs, action: int, zero_firing: str = "identity") -> np.ndarray:
    """Weighted-average Takagi-Sugeno prediction of the next observation.

    When no rule fires, zero_firing selects the fallback: "identity"
    returns the input observation unchanged (logged), "error" raises
    InferenceError.
    """
    obs = np.asarray(obs, dtype=float)
    weights = np.array(
        [firing_strength(rule, obs, action, model.tnorm) for rule in model.rules]
    )
    total = weights.sum()
    if total <= 0.0:
        if zero_firing == "identity":
            log.debug("no rule fires for obs=%s action=%s; returning input", obs, action)
            return obs.copy()
        raise InferenceError(f"no rule fires for obs={obs.tolist()} action={action}")
    outputs = np.array([rule.predict(obs) for rule in model.rules])
    return weights @ outputs / total


# ---------------------------------------------------------------------------
# JSON file format
# ---------------------------------------------------------------------------

def _mf_to_dict(label: str, mf: MembershipFunction) -> dict:
    return {"label": label, "shape": mf.shape, "params": list(mf.params)}


def fuzzy_model_to_dict(model: FuzzyModel) -> dict:
    variables = model.variables
    if not variables:
        # Synthesize variable metadata so inline-built models still serialize.
        collected: list[dict[str, MembershipFunction]] = [dict() for _ in range(model.obs_dim)]
        for rule in model.rules:
            for clause in rule.clauses:
                label = clause.term_label or f"term_{len(collected[clause.dim])}"
                collected[clause.dim].setdefault(label, clause.term)
        variables = tuple(
            FuzzyVariable(name=f"obs_{j}", terms=collected[j]) for j in range(model.obs_dim)
        )
    var_names = [v.name for v in variables]
    rules = []
    for rule in model.rules:
        antecedent = []
        for clause in rule.clauses:
            var = variables[clause.dim]
            label = clause.term_label
            if not label or var.terms.get(label) != clause.term:
                label = next((k for k, v in var.terms.items() if v == clause.term), None)
            if label is None:
                raise ValueError(
                    f"clause on {var.name!r} uses a term missing from the variable table"
                )
            antecedent.append({"var": var.name, "term": label})
        rules.append(
            {
                "antecedent": antecedent,
                "action": rule.action,
                "consequent": rule.consequent.tolist(),
            }
        )
    return {
        "obs_dim": model.obs_dim,
        "num_actions": model.num_actions,
        "tnorm": model.tnorm,
        "variables": [
            {
                "name": v.name,
                "range": list(v.range),
                "terms": [_mf_to_dict(label, mf) for label, mf in v.terms.items()],
            }
            for v in variables
        ],
        "rules": rules,
    }


def fuzzy_model_from_dict(data: dict) -> FuzzyModel:
    if not data.get("rules"):
        raise ValueError("fuzzy model file must declare at least one rule")
    variables = []
    for entry in data["variables"]:
        terms = {
            t["label"]: MembershipFunction(shape=t["shape"], params=tuple(t["params"]))
            for t in entry["terms"]
        }
        variables.append(
            FuzzyVariable(
                name=entry["name"],
                terms=terms,
                range=tuple(entry.get("range", (0.0, 1.0))),
            )
        )
    index_of = {v.name: j for j, v in enumerate(variables)}
    rules = []
    for i, entry in enumerate(data["rules"]):
        clauses = []
        for cond in entry.get("antecedent", ()):
            if cond["var"] not in index_of:
                raise ValueError(f"rule {i}: unknown variable {cond['var']!r}")
            dim = index_of[cond["var"]]
            var = variables[dim]
            if cond["term"] not in var.terms:
                raise ValueError(
                    f"rule {i}: variable {cond['var']!r} has no term {cond['term']!r}"
                )
            clauses.append(
                FuzzyClause(
                    dim=dim,
                    term=var.terms[cond["term"]],
                    var_name=cond["var"],
                    term_label=cond["term"],
                )
            )
        action = entry.get("action")
        rules.append(
            FuzzyRule(
                clauses=tuple(clauses),
                consequent=entry["consequent"],
                action=None if action is None else int(action),
            )
        )
    return FuzzyModel(
        obs_dim=int(data["obs_dim"]),
        num_actions=int(data["num_actions"]),
        rules=tuple(rules),
        tnorm=data.get("tnorm", "product"),
        variables=tuple(variables),
    )


def save_fuzzy_model(model: FuzzyModel, path) -> None:
    Path(path).write_text(json.dumps(fuzzy_model_to_dict(model), indent=2) + "\n")


def load_fuzzy_model(path) -> FuzzyModel:
    return fuzzy_model_from_dict(json.loads(Path(path).read_text()))
