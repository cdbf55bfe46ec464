"""Single-cell electro-thermal model.

Rint equivalent circuit (OCV source + internal resistance) with an affine
SoC/OCV map, plus a lumped-capacitance thermal model: Joule heating from the
internal resistance, convective cooling to the environment.  An internal
short circuit (ISC) enters as an extra current through the internal
resistance, so it contributes to both SoC loss and self-heating.

All functions are pure; discretization is forward Euler.  Currents are in
amperes (positive = discharge), capacity in ampere-hours, time in seconds,
temperature in kelvin.
"""

from __future__ import annotations

from dataclasses import dataclass

AH_TO_AS = 3600.0  # ampere-hours -> ampere-seconds


@dataclass(frozen=True)
class CellParams:
    """Physical parameters of one cell.

    capacity:       nominal capacity [Ah], > 0
    r_internal:     internal resistance [ohm], > 0
    ocv_intercept:  OCV at SoC = 0 [V]
    ocv_slope:      OCV change per unit SoC [V], >= 0
    heat_capacity:  mass * specific heat, stored as one product [J/K], > 0
    r_convection:   convective thermal resistance to ambient [K/W], > 0
    t_env:          environment temperature [K], > 0
    """

    capacity: float
    r_internal: float
    ocv_intercept: float
    ocv_slope: float
    heat_capacity: float
    r_convection: float
    t_env: float

    def __post_init__(self):
        for name in ("capacity", "r_internal", "heat_capacity",
                     "r_convection", "t_env"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"CellParams.{name} must be > 0")
        if self.ocv_slope < 0.0:
            raise ValueError("CellParams.ocv_slope must be >= 0")


# Defaults calibrated so ocv(0.5) equals the 3.6 V nominal of the simulated
# 2.5 Ah cell; every routine takes explicit params, nothing assumes these.
DEFAULT_OCV_INTERCEPT = 3.2
DEFAULT_OCV_SLOPE = 0.8


def default_cell() -> CellParams:
    """Cell parameter set used throughout the shipped scenario presets."""
    return CellParams(
        capacity=2.5,
        r_internal=31.3e-3,
        ocv_intercept=DEFAULT_OCV_INTERCEPT,
        ocv_slope=DEFAULT_OCV_SLOPE,
        heat_capacity=40.23,
        r_convection=41.05,
        t_env=298.0,
    )


@dataclass(frozen=True)
class CellState:
    """SoC (dimensionless) and temperature [K] of one cell."""

    soc: float
    temp: float


def ocv(params: CellParams, soc: float) -> float:
    """Open-circuit voltage at the given SoC (affine, extrapolates freely)."""
    return params.ocv_intercept + params.ocv_slope * soc


def terminal_voltage(params: CellParams, soc: float, i_cell: float,
                     i_isc: float = 0.0) -> float:
    """Terminal voltage under load; ISC current adds to the internal drop."""
    return ocv(params, soc) - params.r_internal * (i_cell + i_isc)


def soc_step(params: CellParams, state: CellState, i_cell: float,
             i_isc: float, dt: float) -> float:
    """Forward-Euler SoC update over dt seconds.

    The 3600 factor converts the Ah capacity to ampere-seconds; it lives
    only here.
    """
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    return state.soc - dt * (i_cell + i_isc) / (AH_TO_AS * params.capacity)


def temp_step(params: CellParams, state: CellState, i_cell: float,
              i_isc: float, dt: float) -> float:
    """Forward-Euler temperature update: Joule heating minus convection."""
    if dt <= 0.0:
        raise ValueError("dt must be > 0")
    i_total = i_cell + i_isc
    heat = params.r_internal * i_total * i_total
    cooling = (state.temp - params.t_env) / params.r_convection
    return state.temp + dt * (heat - cooling) / params.heat_capacity
