"""Analytic targets for checking the sampler without a network.

For U(w) = 0.5 w^T A w the tempered density exp(-U/T) is Gaussian with
covariance T A^-1; a correct SGHMC implementation must reproduce it up to a
discretisation bias that vanishes with the step size.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import linalg

from .sampler import sghmc_update

MIN_SAMPLES = 10_000


@dataclass(frozen=True)
class QuadraticTarget:
    A: np.ndarray

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("A must be a square matrix")
        if a.shape[0] > 10:
            raise ValueError("analytic targets are limited to d <= 10")
        if not np.allclose(a, a.T, rtol=0, atol=1e-12):
            raise ValueError("A must be symmetric")
        if np.linalg.eigvalsh(a).min() <= 0:
            raise ValueError("A must be positive definite")
        object.__setattr__(self, "A", a)

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    def energy(self, w: np.ndarray) -> np.ndarray:
        return 0.5 * np.einsum("...i,ij,...j->...", w, self.A, w)

    def gradient(self, w: np.ndarray) -> np.ndarray:
        return w @ self.A

    def covariance(self, temperature: float) -> np.ndarray:
        return temperature * np.linalg.inv(self.A)


def discrete_covariance(target: QuadraticTarget, eta: float, mu: float, temperature: float) -> np.ndarray:
    """Exact stationary covariance of w for the discretised linear chain.

    The joint state (w, r) follows x' = F x + noise, so its covariance solves
    a discrete Lyapunov equation.  Differs from T A^-1 by O(eta).
    """
    d = target.dim
    eye = np.eye(d)
    # r' = (1-mu) r - eta A w + s xi ;  w' = w + r'
    f = np.block([[eye - eta * target.A, (1 - mu) * eye], [-eta * target.A, (1 - mu) * eye]])
    q_small = 2.0 * eta * mu * temperature * eye
    q = np.block([[q_small, q_small], [q_small, q_small]])
    if np.abs(np.linalg.eigvals(f)).max() >= 1.0:
        raise ValueError("step size too large: the linear chain is unstable")
    return linalg.solve_discrete_lyapunov(f, q)[:d, :d]


def run_analytic_chain(target: QuadraticTarget, steps: int, eta: float, mu: float, temperature: float,
                       rng: np.random.Generator, chains: int = 1, burn_in: int | None = None,
                       thin: int = 1, w0: np.ndarray | None = None) -> np.ndarray:
    """SGHMC with the exact gradient ``A w``; ``chains`` independent copies run side by side.

    Returns the post-burn-in, thinned samples stacked as (n, d), ordered by
    time then chain.  ``burn_in`` defaults to a fifth of ``steps``.
    """
    if steps < 1 or chains < 1 or thin < 1:
        raise ValueError("steps, chains and thin must be >= 1")
    if eta <= 0 or not 0 < mu < 1:
        raise ValueError("need eta > 0 and 0 < mu < 1")
    lam_max = float(np.linalg.eigvalsh(target.A).max())
    if eta * lam_max >= 4.0:
        raise ValueError(f"eta * lambda_max = {eta * lam_max:.3g} exceeds the stability limit")
    burn = steps // 5 if burn_in is None else burn_in
    d = target.dim
    w = np.zeros((chains, d)) if w0 is None else np.broadcast_to(np.asarray(w0, np.float64), (chains, d)).copy()
    r = np.zeros_like(w)
    out = []
    for t in range(steps):
        sghmc_update(w, r, target.gradient(w), eta, mu, temperature, rng)
        if not np.all(np.isfinite(w)):
            raise FloatingPointError(f"analytic chain diverged at step {t}")
        if t >= burn and (t - burn) % thin == 0:
            out.append(w.copy())
    if not out:
        return np.empty((0, d))
    return np.concatenate(out, axis=0) if chains > 1 else np.stack(out)[:, 0, :]


def integrated_autocorr_time(x: np.ndarray, max_lag: int | None = None) -> float:
    """Initial-positive-sequence estimate of the integrated autocorrelation time of a 1-D series."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    x = x - x.mean()
    var = x @ x / n
    if var == 0:
        return 1.0
    nfft = 1 << (2 * n - 1).bit_length()
    fx = np.fft.rfft(x, nfft)
    acf = np.fft.irfft(fx * np.conj(fx), nfft)[:n] / (n * var)
    max_lag = n // 2 if max_lag is None else min(max_lag, n - 1)
    tau = 1.0
    for k in range(1, max_lag, 2):
        pair = acf[k] + (acf[k + 1] if k + 1 < n else 0.0)
        if pair <= 0:
            break
        tau += 2.0 * pair
    return tau


def effective_sample_size(samples: np.ndarray, chains: int = 1) -> float:
    """Smallest per-coordinate ESS, summed over chains.

    ``samples`` is laid out as returned by :func:`run_analytic_chain`:
    (n, d) ordered by time, then chain.
    """
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    if len(s) % chains:
        raise ValueError("sample count is not a multiple of the chain count")
    per = s.reshape(len(s) // chains, chains, s.shape[1])
    return float(min(sum(per.shape[0] / integrated_autocorr_time(per[:, c, i]) for c in range(chains))
                     for i in range(s.shape[1])))


def moment_check(samples: np.ndarray, target: QuadraticTarget, temperature: float,
                 n_effective: float | None = None, cov_tol: float = 0.15, chains: int | None = None) -> dict:
    """Compare the sample mean with 0 and the covariance with T A^-1.

    Passes iff the relative Frobenius error of the covariance is below
    ``cov_tol`` and ``|mean| < 3 * sqrt(tr(T A^-1) / n_eff)``.  At T = 0 the
    target is a point mass and the check is ``max |w| < 1e-6``.
    ``n_eff`` is ``n_effective`` if given, else estimated from the
    autocorrelation when ``chains`` is given, else the sample count.
    """
    s = np.asarray(samples, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    if s.shape[1] != target.dim:
        raise ValueError(f"samples have dimension {s.shape[1]}, target has {target.dim}")
    if n_effective is not None:
        n_eff = float(n_effective)
    elif chains is not None and temperature > 0:
        n_eff = min(effective_sample_size(s, chains), float(len(s)))
    else:
        n_eff = float(len(s))
    if n_eff < MIN_SAMPLES:
        raise ValueError(f"need at least {MIN_SAMPLES} effective samples, got {n_eff:.0f}")
    mean = s.mean(axis=0)
    cov = np.cov(s, rowvar=False).reshape(target.dim, target.dim)
    ref = target.covariance(temperature)
    mean_err = float(np.linalg.norm(mean))
    if temperature == 0:
        cov_err = float(np.linalg.norm(cov))
        passed = bool(np.abs(s).max() < 1e-6)
        stderr = 0.0
    else:
        cov_err = float(np.linalg.norm(cov - ref) / np.linalg.norm(ref))
        stderr = math.sqrt(np.trace(ref) / n_eff)
        passed = bool(cov_err < cov_tol and mean_err < 3.0 * stderr)
    return {
        "dim": target.dim,
        "temperature": temperature,
        "n_samples": int(len(s)),
        "n_effective": n_eff,
        "mean": mean.tolist(),
        "mean_error": mean_err,
        "mean_tolerance": 3.0 * stderr,
        "covariance": cov.tolist(),
        "reference": ref.tolist(),
        "covariance_rel_error": cov_err,
        "covariance_tolerance": cov_tol,
        "pass": passed,
    }


def temperature_slope(target: QuadraticTarget, temperatures, eta: float, mu: float, steps: int,
                      rng: np.random.Generator, chains: int = 100, thin: int = 1) -> dict:
    """Least-squares slope of trace(cov) against T, relative to the theoretical trace(A^-1)."""
    traces = []
    for t in temperatures:
        s = run_analytic_chain(target, steps, eta, mu, t, rng, chains=chains, thin=thin)
        traces.append(float(np.trace(np.cov(s, rowvar=False).reshape(target.dim, target.dim))))
    ts = np.asarray(temperatures, dtype=np.float64)
    slope = float(ts @ np.asarray(traces) / (ts @ ts))
    theory = float(np.trace(np.linalg.inv(target.A)))
    return {"temperatures": ts.tolist(), "traces": traces, "slope": slope, "theory": theory,
            "rel_error": abs(slope - theory) / theory}


@dataclass(frozen=True)
class MixtureTarget:
    """Equal-weight mixture of two unit-variance Gaussians at +-``separation``/2 along the first axis."""
    separation: float = 6.0
    dim: int = 2

    def _centres(self):
        c = np.zeros((2, self.dim))
        c[0, 0], c[1, 0] = -self.separation / 2, self.separation / 2
        return c

    def gradient(self, w: np.ndarray) -> np.ndarray:
        c = self._centres()
        diff = w[..., None, :] - c                      # (..., 2, d)
        logp = -0.5 * (diff ** 2).sum(-1)
        resp = np.exp(logp - logp.max(-1, keepdims=True))
        resp /= resp.sum(-1, keepdims=True)
        return (resp[..., None] * diff).sum(-2)


def mode_visits(target: MixtureTarget, cycles: int, steps_per_cycle: int, rng: np.random.Generator,
                eta: float = 0.01, eta_restart: float = 0.5, restart_steps: int = 50, mu: float = 0.1,
                temperature: float = 0.05, restart_temperature: float = 5.0, burn_in: float = 0.6) -> dict:
    """Cyclical SGHMC on the mixture; counts post-burn-in samples near each mode.

    Each cycle begins with ``restart_steps`` large steps and a hot kick that
    let the chain cross the barrier, then anneals into whichever mode it
    lands in.  Returns per-cycle modes and the total count per mode.
    """
    w = np.zeros(target.dim)
    r = np.zeros(target.dim)
    counts = [0, 0]
    per_cycle = []
    for _ in range(cycles):
        visits = [0, 0]
        for t in range(steps_per_cycle):
            if t < restart_steps:
                lr, temp = eta_restart, restart_temperature
            else:
                lr = eta * (1 - min(t, burn_in * steps_per_cycle) / steps_per_cycle) ** 0.9
                temp = temperature
            sghmc_update(w, r, target.gradient(w), lr, mu, temp, rng)
            if t >= burn_in * steps_per_cycle:
                visits[int(w[0] > 0)] += 1
        per_cycle.append(int(np.argmax(visits)))
        counts[0] += visits[0]
        counts[1] += visits[1]
    return {"counts": counts, "cycle_modes": per_cycle}


def run_oracle_suite(seed: int = 0, steps: int = 5000, chains: int = 1000, thin: int = 40,
                     out: str | Path | None = None) -> dict:
    """The acceptance oracle: 2-D target A = diag(1, 4) at T in {0.25, 1}, plus the T = 0 mode check."""
    rng = np.random.default_rng(seed)
    target = QuadraticTarget(np.diag([1.0, 4.0]))
    eta, mu = 0.01, 0.2
    results = {}
    for t in (0.25, 1.0):
        s = run_analytic_chain(target, steps, eta, mu, t, rng, chains=chains, thin=thin)
        rep = moment_check(s, target, t, chains=chains)
        rep["discrete_reference"] = discrete_covariance(target, eta, mu, t).tolist()
        results[f"quadratic_T{t:g}"] = rep
    s0 = run_analytic_chain(target, 10_000, eta, mu, 0.0, rng, burn_in=9_999, w0=[1.0, -1.0])
    results["quadratic_T0"] = {"final_norm": float(np.linalg.norm(s0[-1])),
                               "pass": bool(np.linalg.norm(s0[-1]) < 1e-6)}
    ratio = np.asarray(results["quadratic_T1"]["covariance"]) / np.asarray(results["quadratic_T0.25"]["covariance"])
    scale = float(np.trace(ratio) / target.dim)
    results["linear_scaling"] = {"ratio": scale, "expected": 4.0,
                                 "pass": bool(abs(scale - 4.0) / 4.0 < 0.10)}
    report = {"seed": seed, "eta": eta, "mu": mu, "thin": thin, "chains": chains, "steps": steps,
              "results": results, "pass": all(r["pass"] for r in results.values())}
    if out is not None:
        Path(out).write_text(json.dumps(report, indent=2, sort_keys=True))
    return report
