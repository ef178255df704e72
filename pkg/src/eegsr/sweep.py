"""Dropout-sweep evaluation: reconstruct random channel subsets with the
model and the spline baseline across dropout rates, reporting NMSE.

Every (rate, seed, epoch) cell draws its own uniform dropped subset. The
dropped count is round(rate * C) capped so at least three channels stay
observed, keeping the spline baseline feasible at extreme rates; cells
that still end up infeasible are reported as such rather than skipped.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .model import FlowAutoencoder
from .pipeline import Epoch, TRAIN_SCALE
from .sampling import SamplerConfig, nmse, reconstruct_batch
from .spline import SplineConfig, SplineError, interpolate_epoch
from .training import DropoutPlan

SPLINE_MIN_OBSERVED = 3


class SweepError(ValueError):
    """Raised for invalid sweep specifications."""


@dataclass(frozen=True)
class SweepSpec:
    """What to evaluate: rates, epochs per seed, seeds, and methods."""

    dropout_rates: tuple[float, ...] = (0.2, 0.5, 0.75, 0.9)
    n_epochs: int = 10
    seeds: tuple[int, ...] = tuple(range(20))
    methods: tuple[str, ...] = ("model", "spline")

    def __post_init__(self):
        if not self.methods:
            raise SweepError("at least one method is required")
        if any(m not in ("model", "spline") for m in self.methods):
            raise SweepError(f"unknown method in {self.methods}")
        if any(not 0.0 < r < 1.0 for r in self.dropout_rates):
            raise SweepError("dropout rates must lie in (0, 1)")
        if not self.seeds:
            raise SweepError("at least one seed is required")


def dropped_count(rate: float, c: int) -> int:
    """round(rate * C), clamped to [1, C-3] so the spline stays feasible."""
    k = int(round(rate * c))
    return max(1, min(k, c - SPLINE_MIN_OBSERVED))


def _seed_cells(
    epochs: list[Epoch], seed: int, n_epochs: int, c: int
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Epoch subset and one channel permutation per epoch for one seed.

    Masks for different rates are nested prefixes of the same permutation:
    each rate's dropped subset is still uniformly distributed, but rates
    become strongly correlated, which stabilizes rate-to-rate comparisons.
    """
    rng = np.random.default_rng([seed, 0x5EED])
    idx = rng.choice(len(epochs), size=min(n_epochs, len(epochs)), replace=False)
    perms = [rng.permutation(c) for _ in idx]
    return idx, perms


def _plan_for(perm: np.ndarray, rate: float, c: int) -> DropoutPlan:
    k = dropped_count(rate, c)
    mask = np.zeros(c, dtype=bool)
    mask[perm[:k]] = True
    return DropoutPlan(mask, k)


def run_sweep(
    epochs: list[Epoch],
    model: FlowAutoencoder | None,
    spec: SweepSpec,
    sampler: SamplerConfig = SamplerConfig(),
    spline_cfg: SplineConfig = SplineConfig(),
) -> list[dict]:
    """Evaluate all (method, rate) pairs; returns one aggregate row each.

    ``epochs`` are z-scored held-out epochs sharing one montage. Rows
    carry method, rate, mean_nmse, sd_nmse, n; infeasible cells lower n
    and a fully infeasible pair is reported with n = 0 and NaN means.
    """
    if not epochs:
        raise SweepError("empty evaluation corpus")
    if "model" in spec.methods and model is None:
        raise SweepError("model method requested but no model given")
    c = epochs[0].n_channels
    if any(e.n_channels != c for e in epochs):
        raise SweepError("evaluation epochs must share a channel count")

    values: dict[tuple[str, float], list[float]] = {
        (m, r): [] for m in spec.methods for r in spec.dropout_rates
    }
    infeasible: dict[tuple[str, float], int] = {
        (m, r): 0 for m in spec.methods for r in spec.dropout_rates
    }

    for seed in spec.seeds:
        idx, perms = _seed_cells(epochs, seed, spec.n_epochs, c)
        chosen = [epochs[i] for i in idx]
        for rate in spec.dropout_rates:
            plans = [_plan_for(perm, rate, c) for perm in perms]
            if "spline" in spec.methods:
                for epoch, plan in zip(chosen, plans):
                    observed = int((~plan.mask).sum())
                    if observed < SPLINE_MIN_OBSERVED:
                        infeasible[("spline", rate)] += 1
                        continue
                    try:
                        recon = interpolate_epoch(
                            epoch.samples,
                            epoch.geometry.positions,
                            plan.mask,
                            spline_cfg,
                        )
                    except SplineError:
                        infeasible[("spline", rate)] += 1
                        continue
                    est = Epoch(recon, epoch.geometry, epoch.bad_channels)
                    values[("spline", rate)].append(nmse(est, epoch, plan))
            if "model" in spec.methods:
                scaled = [
                    replace(e, samples=e.samples * TRAIN_SCALE) for e in chosen
                ]
                cell_sampler = replace(
                    sampler, seed=int(np.random.default_rng([sampler.seed, seed]).integers(2**31))
                )
                recons = reconstruct_batch(model, scaled, plans, cell_sampler)
                for recon, epoch, plan in zip(recons, chosen, plans):
                    values[("model", rate)].append(nmse(recon, epoch, plan))

    rows = []
    for method in spec.methods:
        for rate in spec.dropout_rates:
            vals = values[(method, rate)]
            rows.append(
                {
                    "method": method,
                    "rate": rate,
                    "mean_nmse": float(np.mean(vals)) if vals else float("nan"),
                    "sd_nmse": float(np.std(vals)) if vals else float("nan"),
                    "n": len(vals),
                    "infeasible": infeasible[(method, rate)],
                }
            )
    return rows


def write_sweep_csv(path, rows: list[dict]) -> None:
    """Emit the aggregate table with the documented column set."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "rate", "mean_nmse", "sd_nmse", "n"])
        for row in rows:
            writer.writerow(
                [
                    row["method"],
                    row["rate"],
                    "" if np.isnan(row["mean_nmse"]) else f"{row['mean_nmse']:.6f}",
                    "" if np.isnan(row["sd_nmse"]) else f"{row['sd_nmse']:.6f}",
                    row["n"],
                ]
            )
