"""Core types: group collections, problem instances, decompositions, fits.

Predictor and group indices are 0-based in memory and 1-based in every
serialized form (JSON, CSV, CLI).
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

NORMALIZATIONS = ("column-unit-diag", "row-unit-norm", "none")
_NORM_TOL = 1e-10
# smallest/largest singular value below which X^T X is treated as singular
OLS_RCOND = 1e-10


class SingularDesignError(ValueError):
    """Raised when X^T X is (numerically) singular."""


class GroupCollection:
    """An ordered collection of predictor index sets over ``{0..p-1}``.

    Parameters
    ----------
    groups : sequence of sequences of int
        0-based indices. Each group is stored sorted.
    p : int
        Number of predictors.
    allow_uncovered : bool
        Permit predictors that belong to no group. Off by default because the
        model assumes the groups cover every predictor; contiguous layouts whose
        stride does not reach the last predictor need it.
    """

    def __init__(self, groups: Sequence[Sequence[int]], p: int, allow_uncovered: bool = False):
        p = int(p)
        if p < 1:
            raise ValueError("p must be >= 1")
        if len(groups) == 0:
            raise ValueError("at least one group is required")
        parsed = []
        seen = set()
        for k, g in enumerate(groups):
            arr = np.unique(np.asarray(list(g), dtype=np.intp))
            if arr.size == 0:
                raise ValueError(f"group {k + 1} is empty")
            if len(arr) != len(list(g)):
                raise ValueError(f"group {k + 1} repeats an index")
            if arr[0] < 0 or arr[-1] >= p:
                raise ValueError(f"group {k + 1} has indices outside 1..{p}")
            key = tuple(arr.tolist())
            if key in seen:
                raise ValueError(f"group {k + 1} duplicates an earlier group")
            seen.add(key)
            arr.setflags(write=False)
            parsed.append(arr)
        self.groups = tuple(parsed)
        self.p = p
        counts = np.zeros(p, dtype=np.intp)
        for g in parsed:
            counts[g] += 1
        self.membership = counts
        self.membership.setflags(write=False)
        if not allow_uncovered and np.any(counts == 0):
            missing = (np.flatnonzero(counts == 0) + 1).tolist()
            raise ValueError(f"predictors not covered by any group: {missing[:10]}")
        self.allow_uncovered = allow_uncovered

    @property
    def M(self) -> int:
        return len(self.groups)

    @property
    def overlap(self) -> int:
        """Largest number of groups containing a single predictor."""
        return int(self.membership.max())

    @property
    def sizes(self) -> np.ndarray:
        return np.array([len(g) for g in self.groups], dtype=np.intp)

    @property
    def max_size(self) -> int:
        return int(self.sizes.max())

    @property
    def min_size(self) -> int:
        return int(self.sizes.min())

    @property
    def covered(self) -> np.ndarray:
        return self.membership > 0

    def is_disjoint(self) -> bool:
        return self.overlap == 1

    def __len__(self):
        return self.M

    def __iter__(self):
        return iter(self.groups)

    def __getitem__(self, k):
        return self.groups[k]

    def __eq__(self, other):
        if not isinstance(other, GroupCollection):
            return NotImplemented
        return self.p == other.p and self.to_list() == other.to_list()

    def __repr__(self):
        return f"GroupCollection(M={self.M}, p={self.p}, overlap={self.overlap})"

    def reordered(self, order) -> "GroupCollection":
        return GroupCollection([self.groups[k] for k in order], self.p, self.allow_uncovered)

    def subset(self, keep) -> "GroupCollection":
        return GroupCollection([self.groups[k] for k in keep], self.p, allow_uncovered=True)

    def to_list(self, one_based: bool = False):
        off = 1 if one_based else 0
        return [[int(i) + off for i in g] for g in self.groups]

    def to_json(self) -> dict:
        out = {"p": self.p, "M": self.M, "groups": self.to_list(one_based=True)}
        if self.allow_uncovered:
            out["allow_uncovered"] = True
        return out

    @classmethod
    def from_json(cls, obj, p: Optional[int] = None) -> "GroupCollection":
        """Build from ``{"p": ..., "groups": [[1-based...], ...]}`` or a bare list."""
        if isinstance(obj, dict):
            groups = obj["groups"]
            p = obj.get("p", p)
        else:
            groups = obj
        groups = [[int(i) - 1 for i in g] for g in groups]
        if p is None:
            p = max(max(g) for g in groups) + 1
        allow = bool(obj.get("allow_uncovered", False)) if isinstance(obj, dict) else False
        return cls(groups, p, allow_uncovered=allow)


def make_contiguous_groups(p: int, group_size: int, overlap_param: int) -> GroupCollection:
    """Consecutive-index groups of ``group_size`` with start stride ``group_size + 1 - overlap_param``.

    Groups are added while they fit inside ``{1..p}``; a tail the stride never
    reaches is left uncovered.

    >>> make_contiguous_groups(15, 8, 2).to_list(one_based=True)[1][:2]
    [8, 9]
    """
    if not 1 <= overlap_param <= group_size:
        raise ValueError("overlap_param must lie in [1, group_size]")
    if p < group_size:
        raise ValueError("p must be at least group_size")
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    stride = group_size + 1 - overlap_param
    starts = range(0, p - group_size + 1, stride)
    groups = [list(range(s, s + group_size)) for s in starts]
    return GroupCollection(groups, p, allow_uncovered=True)


def singleton_groups(p: int) -> GroupCollection:
    return GroupCollection([[i] for i in range(p)], p)


def random_group_collection(p: int, M: int, rng, max_size: Optional[int] = None) -> GroupCollection:
    """Random distinct groups covering ``{0..p-1}`` (rejection sampling)."""
    max_size = p if max_size is None else max_size
    if M > 2**p - 1:
        raise ValueError(f"only {2**p - 1} distinct nonempty groups exist over p={p}")
    for _ in range(10_000):
        groups = []
        for _ in range(M):
            size = int(rng.integers(1, max_size + 1))
            groups.append(sorted(rng.choice(p, size, replace=False).tolist()))
        if len({tuple(g) for g in groups}) < M:
            continue
        if len(set().union(*map(set, groups))) == p:
            return GroupCollection(groups, p)
    raise RuntimeError(f"could not draw {M} covering groups over p={p}")


@dataclass(frozen=True)
class ProblemInstance:
    """Linear model data ``y = X beta0 + eps``."""

    X: np.ndarray
    y: np.ndarray
    beta0: Optional[np.ndarray] = None
    sigma: Optional[float] = None
    normalization: str = "none"

    def __post_init__(self):
        X = np.ascontiguousarray(self.X, dtype=float)
        y = np.ascontiguousarray(self.y, dtype=float).ravel()
        if X.ndim != 2:
            raise ValueError("X must be a 2-D array")
        n, p = X.shape
        if n < 1 or p < 1:
            raise ValueError("X must have n >= 1 and p >= 1")
        if y.shape[0] != n:
            raise ValueError(f"y has length {y.shape[0]}, expected {n}")
        beta0 = self.beta0
        if beta0 is not None:
            beta0 = np.ascontiguousarray(beta0, dtype=float).ravel()
            if beta0.shape[0] != p:
                raise ValueError(f"beta0 has length {beta0.shape[0]}, expected {p}")
            beta0.setflags(write=False)
        if self.sigma is not None and self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
        if self.normalization == "column-unit-diag":
            diag = np.einsum("ij,ij->j", X, X) / n
            if np.max(np.abs(diag - 1.0)) > _NORM_TOL:
                raise ValueError("diagonal of X^T X / n is not 1")
        elif self.normalization == "row-unit-norm":
            rows = np.sqrt(np.einsum("ij,ij->i", X, X))
            if np.max(np.abs(rows - 1.0)) > _NORM_TOL:
                raise ValueError("rows of X do not have unit norm")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "beta0", beta0)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def with_response(self, y) -> "ProblemInstance":
        return ProblemInstance(self.X, y, self.beta0, self.sigma, self.normalization)

    def to_json(self) -> dict:
        out = {
            "n": self.n,
            "p": self.p,
            "X": self.X.tolist(),
            "y": self.y.tolist(),
            "normalization": self.normalization,
        }
        if self.beta0 is not None:
            out["beta0"] = self.beta0.tolist()
        if self.sigma is not None:
            out["sigma"] = float(self.sigma)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "ProblemInstance":
        X = np.asarray(obj["X"], dtype=float)
        if "n" in obj and "p" in obj and X.shape != (obj["n"], obj["p"]):
            raise ValueError(f"X has shape {X.shape}, header says ({obj['n']}, {obj['p']})")
        return cls(
            X=X,
            y=np.asarray(obj["y"], dtype=float),
            beta0=None if obj.get("beta0") is None else np.asarray(obj["beta0"], dtype=float),
            sigma=obj.get("sigma"),
            normalization=obj.get("normalization", "none"),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "ProblemInstance":
        return cls.from_json(json.loads(Path(path).read_text()))

    def export_csv(self, directory) -> None:
        """Write ``X.csv``, ``y.csv`` and (if known) ``beta0.csv``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.savetxt(directory / "X.csv", self.X, delimiter=",", fmt="%.17g")
        np.savetxt(directory / "y.csv", self.y, delimiter=",", fmt="%.17g")
        if self.beta0 is not None:
            np.savetxt(directory / "beta0.csv", self.beta0, delimiter=",", fmt="%.17g")


class Decomposition:
    """Latent vectors ``v_g`` (supported on ``g``) that sum to a vector.

    Stored compactly as the concatenated in-group coefficients, block ``g``
    occupying ``latent[offsets[g]:offsets[g+1]]``.
    """

    def __init__(self, groups: GroupCollection, latent, zero_tol: Optional[float] = None):
        self.groups = groups
        self.offsets = np.concatenate([[0], np.cumsum(groups.sizes)]).astype(np.intp)
        latent = np.asarray(latent, dtype=float).copy()
        if latent.shape != (self.offsets[-1],):
            raise ValueError("latent vector length does not match the group sizes")
        latent.setflags(write=False)
        self.latent = latent
        self._zero_tol = zero_tol

    @classmethod
    def from_parts(cls, groups: GroupCollection, parts) -> "Decomposition":
        parts = np.asarray(parts, dtype=float)
        for k, g in enumerate(groups):
            outside = np.delete(parts[k], g)
            if np.any(outside != 0):
                raise ValueError(f"part {k + 1} has support outside its group")
        return cls(groups, np.concatenate([parts[k, g] for k, g in enumerate(groups)]))

    def block(self, g: int) -> np.ndarray:
        return self.latent[self.offsets[g]:self.offsets[g + 1]]

    @property
    def parts(self) -> np.ndarray:
        """Dense ``(M, p)`` array whose row ``g`` is ``v_g``."""
        out = np.zeros((self.groups.M, self.groups.p))
        for k, g in enumerate(self.groups):
            out[k, g] = self.block(k)
        return out

    def vector(self) -> np.ndarray:
        out = np.zeros(self.groups.p)
        for k, g in enumerate(self.groups):
            out[g] += self.block(k)
        return out

    def norms(self) -> np.ndarray:
        return np.array([np.linalg.norm(self.block(k)) for k in range(self.groups.M)])

    def zero_tol(self) -> float:
        if self._zero_tol is not None:
            return self._zero_tol
        return 1e-8 * (1.0 + np.linalg.norm(self.vector()))

    @property
    def active(self) -> np.ndarray:
        """Group indices ``J_v`` with ``||v_g||`` above the zero threshold."""
        return np.flatnonzero(self.norms() > self.zero_tol())

    @property
    def count(self) -> int:
        return int(self.active.size)

    def value(self) -> float:
        return float(self.norms().sum())

    def to_json(self) -> list:
        out = []
        for k, g in enumerate(self.groups):
            out.append({
                "group": k + 1,
                "indices": (g + 1).tolist(),
                "values": self.block(k).tolist(),
            })
        return out


@dataclass
class FitResult:
    beta_hat: np.ndarray
    decomposition: Decomposition
    lam: float
    weights: Optional[np.ndarray] = None
    gamma: Optional[float] = None
    iterations: int = 0
    objective: float = np.nan
    kkt_residual: float = np.inf
    converged: bool = False
    history: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def to_json(self) -> dict:
        weights = None
        if self.weights is not None:
            weights = [None if not np.isfinite(w) else float(w) for w in self.weights]
        return {
            "lambda": float(self.lam),
            "gamma": self.gamma,
            "weights": weights,
            "beta_hat": self.beta_hat.tolist(),
            "active_groups": (self.decomposition.active + 1).tolist(),
            "decomposition": self.decomposition.to_json(),
            "iterations": int(self.iterations),
            "objective": float(self.objective),
            "kkt_residual": float(self.kkt_residual),
            "converged": bool(self.converged),
        }


def normalize_rows(X: np.ndarray) -> np.ndarray:
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def normalize_columns(X: np.ndarray) -> np.ndarray:
    """Scale columns so that ``diag(X^T X / n) == 1``."""
    n = X.shape[0]
    return X / np.sqrt(np.einsum("ij,ij->j", X, X) / n)


def support_of_first_groups(groups: GroupCollection, k: int) -> np.ndarray:
    if k == 0:
        return np.zeros(0, dtype=np.intp)
    return np.unique(np.concatenate(groups.groups[:k]))


def generate_instance(p: int, n: int, groups: GroupCollection, k_active: int, sigma: float,
                      seed, normalization: str = "row-unit-norm") -> ProblemInstance:
    """Gaussian design with a signal on the union of the first ``k_active`` groups.

    Draw order under one generator: X, then the N(0, 1) signal entries on the
    support, then the noise. ``normalization`` is ``row-unit-norm`` (simulation
    setting) or ``column-unit-diag`` (finite-sample theory setting).
    """
    if groups.p != p:
        raise ValueError("groups are defined over a different p")
    if not 0 <= k_active <= groups.M:
        raise ValueError(f"k_active must lie in [0, {groups.M}]")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    if normalization == "row-unit-norm":
        X = normalize_rows(X)
    elif normalization == "column-unit-diag":
        X = normalize_columns(X)
    elif normalization != "none":
        raise ValueError(f"normalization must be one of {NORMALIZATIONS}")
    beta0 = np.zeros(p)
    support = support_of_first_groups(groups, k_active)
    beta0[support] = rng.standard_normal(support.size)
    eps = sigma * rng.standard_normal(n) if sigma > 0 else np.zeros(n)
    return ProblemInstance(X, X @ beta0 + eps, beta0, float(sigma), normalization)


def ols_fit(instance: ProblemInstance) -> np.ndarray:
    X = instance.X
    if X.shape[0] < X.shape[1]:
        raise SingularDesignError("OLS needs n >= p")
    sv = np.linalg.svd(X, compute_uv=False)
    if sv[-1] < OLS_RCOND * sv[0]:
        raise SingularDesignError(
            f"X^T X is singular (singular value ratio {sv[-1] / sv[0]:.3g})")
    beta, *_ = np.linalg.lstsq(X, instance.y, rcond=None)
    return beta


def recovery_error(beta_hat, beta0) -> float:
    beta0 = np.asarray(beta0, dtype=float)
    denom = np.linalg.norm(beta0)
    if denom == 0:
        raise ValueError("recovery error is undefined for beta0 = 0")
    return float(np.linalg.norm(beta0 - np.asarray(beta_hat, dtype=float)) / denom)


def write_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)
