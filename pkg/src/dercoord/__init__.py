"""Two-layer coordination of distributed storage on radial distribution feeders.

A global controller solves a second-order-cone relaxation of multi-period AC
optimal power flow with a soft voltage penalty and hands each storage node a
net-load profile with soft bounds; independent local controllers track those
profiles while trading off their own energy cost.
"""
from .network import RadialNetwork, load_fixture, load_network
from .conic import ConicProgram, ProgramBuilder, SolverSettings, solve
from .storage import BatterySpec
from .tariff import TouTariff, SimMetrics

__all__ = ["RadialNetwork", "load_fixture", "load_network", "ConicProgram", "ProgramBuilder",
           "SolverSettings", "solve", "BatterySpec", "TouTariff", "SimMetrics"]
__version__ = "0.1.0"
