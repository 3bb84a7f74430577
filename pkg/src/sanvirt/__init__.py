"""Block-level SAN virtualization engine with a deterministic fabric simulator."""
from .architectures import ArchitectureMode, Wiring, build
from .bench import RunReport, compare, run
from .config import ScenarioConfig, load_config
from .errors import SanError
from .extent import MappingTable, PhysicalLocation, StripeLayout, ThinPool

__all__ = ["ArchitectureMode", "MappingTable", "PhysicalLocation", "RunReport", "SanError",
           "ScenarioConfig", "StripeLayout", "ThinPool", "Wiring", "build", "compare",
           "load_config", "run"]
