"""Toy Bayesian joint generators with closed-form posterior oracles.

Every generator returns a JointDataset of i.i.d. draws from a declared
joint distribution over (x, y) together with a PosteriorOracle exposing
the exact conditional mean/std and a sampler for x given y. The oracles
are the ground truth that posterior-sampling tests compare against.
Provenance dictionaries fully determine a dataset and can be replayed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .streams import substream

PROVENANCE_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class JointDataset:
    """N joint draws: x (N, d) paired with conditions y (N, n)."""

    x: np.ndarray
    y: np.ndarray
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        y = np.asarray(self.y, dtype=np.float64)
        if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0] or x.shape[0] == 0:
            raise ValueError("x and y must be non-empty 2-D arrays with equal rows")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
            raise ValueError("dataset contains non-finite values")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def d(self):
        return self.x.shape[1]

    @property
    def n(self):
        return self.y.shape[1]


@dataclass(frozen=True)
class PosteriorOracle:
    """Closed-form conditional law of x given y.

    kind "gaussian": mean(y) is linear in y with a fixed covariance.
    kind "discrete": y ranges over finitely many atoms, each with its own
    Gaussian conditional; atoms holds them as rows and conditioning on any
    other y is an error.
    """

    kind: str
    d: int
    n: int
    params: dict
    atoms: np.ndarray | None = None

    def _atom_index(self, y):
        matches = np.nonzero(np.all(self.atoms == y, axis=1))[0]
        if matches.size != 1:
            raise ValueError(f"y={y!r} is not one of the oracle's atoms")
        return int(matches[0])

    def _check_y(self, y):
        y = np.asarray(y, dtype=np.float64).reshape(-1)
        if y.shape != (self.n,):
            raise ValueError(f"y must have {self.n} entries")
        return y

    def mean(self, y):
        y = self._check_y(y)
        if self.kind == "gaussian":
            return self.params["mean_map"] @ y
        return self.params["means"][self._atom_index(y)].copy()

    def std(self, y):
        y = self._check_y(y)
        if self.kind == "gaussian":
            return np.sqrt(np.diag(self.params["cov"]))
        return self.params["stds"][self._atom_index(y)].copy()

    def sample(self, y, count, rng):
        y = self._check_y(y)
        if count < 1:
            raise ValueError("count must be >= 1")
        if self.kind == "gaussian":
            z = rng.normal(size=(count, self.d))
            return self.mean(y) + z @ self.params["chol"].T
        j = self._atom_index(y)
        z = rng.normal(size=(count, self.d))
        return self.params["means"][j] + self.params["stds"][j] * z


# ---------------------------------------------------------------------------
# generators
# ---------------------------------------------------------------------------

def _positive_scale(value, name):
    v = float(value)
    if not (v > 0 and np.isfinite(v)):
        raise ValueError(f"{name} must be positive and finite")
    return v


def linear_gaussian(a, sigma, prior_std, N, seed):
    """Gaussian prior observed through a linear map with Gaussian noise.

    x ~ N(0, prior_std^2 I_d), y = A x + eps with eps ~ N(0, sigma^2 I_n).
    A scalar a means the one-dimensional model y = a x + eps. The conjugate
    posterior is Gaussian: cov = (A'A/sigma^2 + I/prior^2)^-1 and
    mean(y) = cov A' y / sigma^2.
    """
    A = np.atleast_2d(np.asarray(a, dtype=np.float64))
    if A.ndim != 2 or not np.all(np.isfinite(A)):
        raise ValueError("a must be a finite scalar or matrix")
    sigma = _positive_scale(sigma, "sigma")
    prior_std = _positive_scale(prior_std, "prior_std")
    N = int(N)
    if N < 1:
        raise ValueError("N must be >= 1")
    n_obs, d = A.shape

    rng = substream(seed, "linear_gaussian")
    x = prior_std * rng.normal(size=(N, d))
    y = x @ A.T + sigma * rng.normal(size=(N, n_obs))

    precision = A.T @ A / sigma**2 + np.eye(d) / prior_std**2
    cov = np.linalg.inv(precision)
    cov = 0.5 * (cov + cov.T)
    mean_map = cov @ A.T / sigma**2
    oracle = PosteriorOracle(
        kind="gaussian",
        d=d,
        n=n_obs,
        params={"mean_map": mean_map, "cov": cov, "chol": np.linalg.cholesky(cov)},
    )
    provenance = {
        "schema_version": PROVENANCE_SCHEMA_VERSION,
        "generator": "linear_gaussian",
        "parameters": {"a": A.tolist(), "sigma": sigma, "prior_std": prior_std, "N": N},
        "seed": int(seed),
    }
    return JointDataset(x=x, y=y, provenance=provenance), oracle


def labeled_clusters(means, std, N, seed):
    """Uniform class label, Gaussian cluster around the class mean, one-hot y."""
    M = np.atleast_2d(np.asarray(means, dtype=np.float64))
    K, d = M.shape
    if K < 2:
        raise ValueError("need at least 2 classes")
    if not np.all(np.isfinite(M)):
        raise ValueError("means must be finite")
    std = _positive_scale(std, "std")
    N = int(N)
    if N < 1:
        raise ValueError("N must be >= 1")

    rng = substream(seed, "labeled_clusters")
    labels = rng.integers(0, K, size=N)
    x = M[labels] + std * rng.normal(size=(N, d))
    y = np.zeros((N, K))
    y[np.arange(N), labels] = 1.0

    oracle = PosteriorOracle(
        kind="discrete",
        d=d,
        n=K,
        params={"means": M.copy(), "stds": np.full((K, d), std)},
        atoms=np.eye(K),
    )
    provenance = {
        "schema_version": PROVENANCE_SCHEMA_VERSION,
        "generator": "labeled_clusters",
        "parameters": {"means": M.tolist(), "std": std, "N": N},
        "seed": int(seed),
    }
    return JointDataset(x=x, y=y, provenance=provenance), oracle


def discrete_y_toy(atoms, means, stds, N, seed):
    """Uniform draw over J distinct scalar y atoms; x Gaussian per atom.

    Exact conditioning on each atom makes per-condition posterior metrics
    computable without binning.
    """
    atoms_arr = np.asarray(atoms, dtype=np.float64)
    if atoms_arr.ndim == 1:
        atoms_arr = atoms_arr[:, None]
    J = atoms_arr.shape[0]
    if J < 2:
        raise ValueError("need at least 2 atoms")
    if np.unique(atoms_arr, axis=0).shape[0] != J:
        raise ValueError("atoms must be distinct")
    M = np.asarray(means, dtype=np.float64)
    if M.ndim == 1:
        M = M[:, None]
    S = np.asarray(stds, dtype=np.float64).reshape(-1)
    if M.shape[0] != J or S.shape[0] != J:
        raise ValueError("means and stds must have one entry per atom")
    if not np.all(S > 0) or not np.all(np.isfinite(S)) or not np.all(np.isfinite(M)):
        raise ValueError("stds must be positive and all parameters finite")
    N = int(N)
    if N < 1:
        raise ValueError("N must be >= 1")
    d = M.shape[1]

    rng = substream(seed, "discrete_y_toy")
    labels = rng.integers(0, J, size=N)
    x = M[labels] + S[labels][:, None] * rng.normal(size=(N, d))
    y = atoms_arr[labels]

    oracle = PosteriorOracle(
        kind="discrete",
        d=d,
        n=atoms_arr.shape[1],
        params={"means": M.copy(), "stds": np.repeat(S[:, None], d, axis=1)},
        atoms=atoms_arr.copy(),
    )
    provenance = {
        "schema_version": PROVENANCE_SCHEMA_VERSION,
        "generator": "discrete_y_toy",
        "parameters": {
            "atoms": atoms_arr.tolist(),
            "means": M.tolist(),
            "stds": S.tolist(),
            "N": N,
        },
        "seed": int(seed),
    }
    return JointDataset(x=x, y=y, provenance=provenance), oracle


def latent_sampler(kind, d, N, seed):
    """i.i.d. latent draws: standard normal or uniform on [-1, 1]^d."""
    if kind not in ("gaussian", "uniform"):
        raise ValueError(f"unknown latent kind {kind!r}")
    d, N = int(d), int(N)
    if d < 1 or N < 1:
        raise ValueError("need d >= 1 and N >= 1")
    rng = substream(seed, "latent", kind)
    if kind == "gaussian":
        return rng.normal(size=(N, d))
    return rng.uniform(-1.0, 1.0, size=(N, d))


# ---------------------------------------------------------------------------
# provenance replay
# ---------------------------------------------------------------------------

_GENERATORS = {
    "linear_gaussian": linear_gaussian,
    "labeled_clusters": labeled_clusters,
    "discrete_y_toy": discrete_y_toy,
}


def problem_from_provenance(provenance):
    """Rebuilds (JointDataset, PosteriorOracle) from a provenance record."""
    name = provenance.get("generator")
    if name not in _GENERATORS:
        raise ValueError(f"unknown generator {name!r}")
    if provenance.get("schema_version") != PROVENANCE_SCHEMA_VERSION:
        raise ValueError("unsupported provenance schema_version")
    params = dict(provenance["parameters"])
    return _GENERATORS[name](seed=provenance["seed"], **params)


def dataset_from_provenance(provenance) -> JointDataset:
    return problem_from_provenance(provenance)[0]


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------

def sidecar_path(csv_path) -> Path:
    return Path(csv_path).with_suffix(".provenance.json")


def export_dataset(ds: JointDataset, csv_path) -> None:
    """Writes the dataset as CSV (floats via repr, so they re-read exactly)
    plus a .provenance.json sidecar."""
    csv_path = Path(csv_path)
    cols = [f"x_{i}" for i in range(ds.d)] + [f"y_{j}" for j in range(ds.n)]
    arr = np.concatenate([ds.x, ds.y], axis=1)
    with open(csv_path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for row in arr:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    with open(sidecar_path(csv_path), "w") as fh:
        json.dump(ds.provenance, fh, indent=2)
        fh.write("\n")


def read_dataset_csv(path):
    """Reads an exported CSV back into (x, y) arrays using its header."""
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    d = sum(1 for c in header if c.startswith("x_"))
    n = sum(1 for c in header if c.startswith("y_"))
    if d + n != len(header) or d == 0:
        raise ValueError(f"unrecognized dataset header: {header}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != d + n:
        raise ValueError("row width does not match header")
    return data[:, :d].copy(), data[:, d:].copy()
