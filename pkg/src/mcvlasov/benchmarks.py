"""Shipped benchmark configurations shared by tests, the CLI and validate.

Every stochastic benchmark fixes its seeds here so that runs are
reproducible from the configuration alone.
"""

from __future__ import annotations

from dataclasses import dataclass

from .coefficients import (
    CoefficientSet,
    DiffusionMatrix,
    InteractionDrift,
    PotentialTerm,
    drift_preset,
    potential_preset,
    sigma_field,
)
from .core import DensityField, Grid1D, TimeGrid, gaussian_density


@dataclass(frozen=True)
class MildBenchmark:
    name: str
    grid: Grid1D
    tgrid: TimeGrid
    coeffs: CoefficientSet
    initial: DensityField
    tol: float = 1e-8


def heat_baseline() -> MildBenchmark:
    grid = Grid1D(-10.0, 10.0, 2001)
    return MildBenchmark(
        name="heat_baseline",
        grid=grid,
        tgrid=TimeGrid(1.0, 200),
        coeffs=CoefficientSet(diffusion=DiffusionMatrix.measure(1.0, grid)),
        initial=gaussian_density(grid, 0.0, 1.0),
        tol=1e-10,
    )


def mean_reversion_benchmark() -> MildBenchmark:
    # rate 0.5 keeps the global fixed-point iteration inside 30 sweeps at T=1;
    # the tolerance sits just above the iteration's roundoff floor so the
    # leftover pointwise halo stays within the negativity projection band
    grid = Grid1D(-11.0, 11.0, 881)
    return MildBenchmark(
        name="mean_reversion",
        grid=grid,
        tgrid=TimeGrid(1.0, 160),
        coeffs=CoefficientSet(
            diffusion=DiffusionMatrix.measure(1.0, grid),
            drift=drift_preset("mean_reversion", rate=0.5, coupling=1.0),
        ),
        initial=gaussian_density(grid, 0.5, 0.8),
        tol=1e-12,
    )


def potential_decay_benchmark(rate: float = 1.0) -> MildBenchmark:
    grid = Grid1D(-11.0, 11.0, 881)
    return MildBenchmark(
        name="potential_decay",
        grid=grid,
        tgrid=TimeGrid(1.0, 160),
        coeffs=CoefficientSet(
            diffusion=DiffusionMatrix.measure(1.0, grid),
            potential=potential_preset("constant", value=-rate),
        ),
        initial=gaussian_density(grid, 0.0, 1.0),
        tol=2e-12,
    )


def moment_quadratic_benchmark() -> MildBenchmark:
    grid = Grid1D(-9.0, 9.0, 721)
    return MildBenchmark(
        name="moment_quadratic",
        grid=grid,
        tgrid=TimeGrid(0.5, 100),
        coeffs=CoefficientSet(
            diffusion=DiffusionMatrix.measure(1.0, grid),
            drift=drift_preset("moment_quadratic", scale=0.5, center=0.0, width=1.0),
        ),
        initial=gaussian_density(grid, 0.3, 0.9),
        tol=2e-12,
    )


MILD_BENCHMARKS = {
    "heat_baseline": heat_baseline,
    "mean_reversion": mean_reversion_benchmark,
    "potential_decay": potential_decay_benchmark,
    "moment_quadratic": moment_quadratic_benchmark,
}


@dataclass(frozen=True)
class PathBenchmark:
    name: str
    grid: Grid1D
    tgrid: TimeGrid
    sigma_ind: object
    drift: InteractionDrift | None
    sigma_com: object  # SmoothField1D for state noise, tuple for constant matrix
    initial: DensityField
    seeds: tuple


def spde_constant_noise() -> PathBenchmark:
    """Constant common noise on top of unit idiosyncratic diffusion, b = 0."""
    grid = Grid1D(-12.0, 12.0, 1201)
    return PathBenchmark(
        name="spde_constant_noise",
        grid=grid,
        tgrid=TimeGrid(1.0, 400),
        sigma_ind=sigma_field("constant", value=1.0),
        drift=None,
        sigma_com=sigma_field("constant", value=0.5),
        initial=gaussian_density(grid, 0.0, 1.0),
        seeds=tuple(range(100, 120)),
    )


def spde_conditional_gaussian() -> PathBenchmark:
    """Mean reversion with constant common noise; the conditional law stays
    Gaussian with mean riding the noise and variance relaxing to 1/2."""
    grid = Grid1D(-12.0, 12.0, 961)
    return PathBenchmark(
        name="spde_conditional_gaussian",
        grid=grid,
        tgrid=TimeGrid(1.0, 400),
        sigma_ind=sigma_field("constant", value=1.0),
        drift=drift_preset("mean_reversion", rate=1.0, coupling=1.0),
        sigma_com=(0.5,),
        initial=gaussian_density(grid, 0.0, 1.0),
        seeds=tuple(range(300, 320)),
    )


def ito_stratonovich_benchmark(steps: int = 200) -> PathBenchmark:
    grid = Grid1D(-8.0, 8.0, 801)
    return PathBenchmark(
        name="ito_stratonovich",
        grid=grid,
        tgrid=TimeGrid(0.25, steps),
        sigma_ind=sigma_field("constant", value=1.0),
        drift=None,
        sigma_com=sigma_field("linear", rate=1.0),
        initial=gaussian_density(grid, 0.0, 0.5),
        seeds=tuple(range(500, 520)),
    )


def chaos_benchmark() -> PathBenchmark:
    """Mean reversion with common noise, the propagation-of-chaos target."""
    grid = Grid1D(-10.0, 10.0, 501)
    return PathBenchmark(
        name="chaos",
        grid=grid,
        tgrid=TimeGrid(0.5, 200),
        sigma_ind=sigma_field("constant", value=1.0),
        drift=drift_preset("mean_reversion", rate=1.0, coupling=1.0),
        sigma_com=(0.5,),
        initial=gaussian_density(grid, 0.0, 1.0),
        seeds=tuple(range(700, 710)),
    )


def expectation_stability_benchmark() -> PathBenchmark:
    """Over-reacting mean coupling so the pairwise gap genuinely grows."""
    grid = Grid1D(-10.0, 10.0, 601)
    return PathBenchmark(
        name="expectation_stability",
        grid=grid,
        tgrid=TimeGrid(1.0, 100),
        sigma_ind=sigma_field("constant", value=1.0),
        drift=drift_preset("mean_reversion", rate=1.0, coupling=1.5),
        sigma_com=sigma_field("bounded_odd", amplitude=0.3),
        initial=gaussian_density(grid, 0.0, 1.0),
        seeds=tuple(range(900, 1100)),
    )


PATH_BENCHMARKS = {
    "spde_constant_noise": spde_constant_noise,
    "spde_conditional_gaussian": spde_conditional_gaussian,
    "ito_stratonovich": ito_stratonovich_benchmark,
    "chaos": chaos_benchmark,
    "expectation_stability": expectation_stability_benchmark,
}
