"""Posterior-draw storage, checkpointing, and deterministic serialization.

The binary container is a deliberately boring format: a magic header, a
JSON metadata block with sorted keys, then raw little-endian array bytes in
a fixed order.  Unlike zip-based formats it contains no timestamps, so the
same draws always serialize to the same bytes.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .data import format_float

_MAGIC = b"SPFACTOR\x00"
_FORMAT_VERSION = 1


@dataclass
class PosteriorDraws:
    """Retained post-burn-in states in column-addressable arrays.

    Ragged stick structures are padded per column: ``weights[j]`` is
    (S, n_cells, Lmax_j) with each draw's closing rule applied at its own
    truncation, so every (draw, cell) weight row sums to one.
    """

    family: str
    loadings_prior: str
    temporal_kernel: str
    times: np.ndarray
    m: int
    O: int
    k: int
    p: int
    iteration: np.ndarray          # (S,) 1-based sweep index
    chain: np.ndarray              # (S,) chain id
    beta: np.ndarray               # (S, p)
    eta: np.ndarray                # (S, T, k)
    lam: np.ndarray                # (S, n_cells, k)
    sigma2: np.ndarray             # (S, n_cells); zeros for binomial
    kappa: np.ndarray              # (S, O, O)
    upsilon: np.ndarray            # (S, k, k)
    delta: np.ndarray              # (S, k)
    rho: np.ndarray                # (S,)
    psi: np.ndarray                # (S,)
    xi: np.ndarray                 # (S, k, n_cells) int; zeros for non-PSBP
    weights: list[np.ndarray]      # k arrays (S, n_cells, Lmax_j); empty for non-PSBP
    loglik: np.ndarray             # (n_obs_cells, S)
    obs_index: np.ndarray          # (n_obs_cells, 2) 0-based (t, cell)
    acceptance: dict = field(default_factory=dict)
    last_trials: np.ndarray | None = None  # (n_cells,) binomial: n at the last visit

    @property
    def n_draws(self) -> int:
        return self.rho.shape[0]

    @property
    def n_cells(self) -> int:
        return self.m * self.O

    @property
    def has_sticks(self) -> bool:
        return self.loadings_prior.startswith("psbp")

    def subset(self, idx) -> "PosteriorDraws":
        idx = np.asarray(idx)
        return PosteriorDraws(
            family=self.family, loadings_prior=self.loadings_prior,
            temporal_kernel=self.temporal_kernel, times=self.times,
            m=self.m, O=self.O, k=self.k, p=self.p,
            iteration=self.iteration[idx], chain=self.chain[idx],
            beta=self.beta[idx], eta=self.eta[idx], lam=self.lam[idx],
            sigma2=self.sigma2[idx], kappa=self.kappa[idx],
            upsilon=self.upsilon[idx], delta=self.delta[idx],
            rho=self.rho[idx], psi=self.psi[idx], xi=self.xi[idx],
            weights=[w[idx] for w in self.weights],
            loglik=np.asarray(self.loglik)[:, idx], obs_index=self.obs_index,
            acceptance=dict(self.acceptance), last_trials=self.last_trials,
        )


def merge_draws(parts: list[PosteriorDraws]) -> PosteriorDraws:
    """Concatenate chains; associative, ordered by the given list."""
    head = parts[0]
    if len(parts) == 1:
        return head
    lmax = [max(p.weights[j].shape[2] for p in parts) for j in range(head.k)] \
        if head.has_sticks else []

    def pad(w, L):
        if w.shape[2] == L:
            return w
        out = np.zeros((w.shape[0], w.shape[1], L))
        out[:, :, :w.shape[2]] = w
        return out

    acc = {}
    for p in parts:
        for key, val in p.acceptance.items():
            acc.setdefault(key, []).append(val)
    acc = {k: float(np.mean(v)) for k, v in acc.items()}
    return PosteriorDraws(
        family=head.family, loadings_prior=head.loadings_prior,
        temporal_kernel=head.temporal_kernel, times=head.times,
        m=head.m, O=head.O, k=head.k, p=head.p,
        iteration=np.concatenate([p.iteration for p in parts]),
        chain=np.concatenate([p.chain for p in parts]),
        beta=np.concatenate([p.beta for p in parts]),
        eta=np.concatenate([p.eta for p in parts]),
        lam=np.concatenate([p.lam for p in parts]),
        sigma2=np.concatenate([p.sigma2 for p in parts]),
        kappa=np.concatenate([p.kappa for p in parts]),
        upsilon=np.concatenate([p.upsilon for p in parts]),
        delta=np.concatenate([p.delta for p in parts]),
        rho=np.concatenate([p.rho for p in parts]),
        psi=np.concatenate([p.psi for p in parts]),
        xi=np.concatenate([p.xi for p in parts]),
        weights=[np.concatenate([pad(p.weights[j], lmax[j]) for p in parts])
                 for j in range(head.k)] if head.has_sticks else [],
        loglik=np.concatenate([np.asarray(p.loglik) for p in parts], axis=1),
        obs_index=head.obs_index,
        acceptance=acc,
        last_trials=head.last_trials,
    )


# -- deterministic binary container ------------------------------------------


def _write_blob(fh, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    manifest = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        manifest.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)})
    meta = dict(meta)
    meta["format_version"] = _FORMAT_VERSION
    meta["arrays"] = manifest
    head = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    fh.write(_MAGIC)
    fh.write(len(head).to_bytes(8, "little"))
    fh.write(head)
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        fh.write(arr.tobytes())


def _read_blob(fh) -> tuple[dict, dict[str, np.ndarray]]:
    magic = fh.read(len(_MAGIC))
    if magic != _MAGIC:
        raise ValueError("not an spfactor container")
    n = int.from_bytes(fh.read(8), "little")
    meta = json.loads(fh.read(n).decode())
    if meta.get("format_version") != _FORMAT_VERSION:
        raise ValueError(f"unsupported container version {meta.get('format_version')}")
    arrays = {}
    for entry in meta["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        buf = fh.read(count * dtype.itemsize)
        arrays[entry["name"]] = np.frombuffer(buf, dtype=dtype).reshape(shape).copy()
    meta.pop("arrays")
    meta.pop("format_version")
    return meta, arrays


def save_draws(path, draws: PosteriorDraws) -> None:
    meta = {
        "kind": "posterior_draws",
        "family": draws.family,
        "loadings_prior": draws.loadings_prior,
        "temporal_kernel": draws.temporal_kernel,
        "m": draws.m, "O": draws.O, "k": draws.k, "p": draws.p,
        "acceptance": {key: float(v) for key, v in draws.acceptance.items()},
        "n_weight_cols": [w.shape[2] for w in draws.weights],
    }
    arrays = {
        "times": draws.times, "iteration": draws.iteration, "chain": draws.chain,
        "beta": draws.beta, "eta": draws.eta, "lam": draws.lam,
        "sigma2": draws.sigma2, "kappa": draws.kappa, "upsilon": draws.upsilon,
        "delta": draws.delta, "rho": draws.rho, "psi": draws.psi,
        "xi": draws.xi, "loglik": np.asarray(draws.loglik),
        "obs_index": draws.obs_index,
        "last_trials": (draws.last_trials if draws.last_trials is not None
                        else np.zeros(0)),
    }
    for j, w in enumerate(draws.weights):
        arrays[f"weights_{j}"] = w
    with open(path, "wb") as fh:
        _write_blob(fh, meta, arrays)


def load_draws(path) -> PosteriorDraws:
    with open(path, "rb") as fh:
        meta, arrays = _read_blob(fh)
    if meta.get("kind") != "posterior_draws":
        raise ValueError("container does not hold posterior draws")
    weights = [arrays[f"weights_{j}"] for j in range(len(meta["n_weight_cols"]))]
    last_trials = arrays.get("last_trials")
    if last_trials is not None and last_trials.size == 0:
        last_trials = None
    return PosteriorDraws(
        family=meta["family"], loadings_prior=meta["loadings_prior"],
        temporal_kernel=meta["temporal_kernel"], times=arrays["times"],
        m=meta["m"], O=meta["O"], k=meta["k"], p=meta["p"],
        iteration=arrays["iteration"], chain=arrays["chain"], beta=arrays["beta"],
        eta=arrays["eta"], lam=arrays["lam"], sigma2=arrays["sigma2"],
        kappa=arrays["kappa"], upsilon=arrays["upsilon"], delta=arrays["delta"],
        rho=arrays["rho"], psi=arrays["psi"], xi=arrays["xi"],
        weights=weights, loglik=arrays["loglik"], obs_index=arrays["obs_index"],
        acceptance=dict(meta["acceptance"]), last_trials=last_trials,
    )


def save_state_blob(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        _write_blob(fh, meta, arrays)


def load_state_blob(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        return _read_blob(fh)


# -- CSV export ----------------------------------------------------------------


def write_draws_csv(path, draws: PosteriorDraws) -> None:
    """One row per retained draw, one named column per scalar parameter.

    Ragged stick columns (theta is not stored; weights are) are padded with
    empty fields beyond a draw's active truncation.
    """
    S = draws.n_draws
    T = draws.times.size
    N = draws.n_cells
    header = ["chain", "iteration"]
    header += [f"beta[{i + 1}]" for i in range(draws.p)]
    header += [f"eta[{t + 1},{j + 1}]" for t in range(T) for j in range(draws.k)]
    header += [f"lam[{c + 1},{j + 1}]" for c in range(N) for j in range(draws.k)]
    if draws.family == "gaussian":
        header += [f"sigma2[{c + 1}]" for c in range(N)]
    header += [f"kappa[{a + 1},{b + 1}]" for a in range(draws.O) for b in range(draws.O)]
    header += [f"upsilon[{a + 1},{b + 1}]" for a in range(draws.k) for b in range(draws.k)]
    header += [f"delta[{h + 1}]" for h in range(draws.k)]
    header += ["rho", "psi"]
    if draws.has_sticks:
        header += [f"xi[{j + 1},{c + 1}]" for j in range(draws.k) for c in range(N)]
        for j, w in enumerate(draws.weights):
            header += [f"w[{j + 1},{l + 1},{c + 1}]"
                       for l in range(w.shape[2]) for c in range(N)]
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        for s in range(S):
            row = [int(draws.chain[s]), int(draws.iteration[s])]
            row += [format_float(v) for v in draws.beta[s]]
            row += [format_float(v) for v in draws.eta[s].reshape(-1)]
            row += [format_float(v) for v in draws.lam[s].reshape(-1)]
            if draws.family == "gaussian":
                row += [format_float(v) for v in draws.sigma2[s]]
            row += [format_float(v) for v in draws.kappa[s].reshape(-1)]
            row += [format_float(v) for v in draws.upsilon[s].reshape(-1)]
            row += [format_float(v) for v in draws.delta[s]]
            row += [format_float(draws.rho[s]), format_float(draws.psi[s])]
            if draws.has_sticks:
                row += [str(int(v)) for v in draws.xi[s].reshape(-1)]
                for w in draws.weights:
                    row += [format_float(v) for v in w[s].T.reshape(-1)]
            out.writerow(row)
