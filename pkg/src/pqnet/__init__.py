"""Parallel discrete-event simulator for entanglement distribution networks.

Simulation time is an integer count of picoseconds everywhere; event order is
the total order (time, source entity id, per-source sequence number), which is
independent of how the network is partitioned across workers.
"""

__version__ = "0.1.0"

from .config import (  # noqa: F401
    Materials,
    ParseError,
    RunConfig,
    ValidationError,
    config_hash,
    load_config,
    materialize,
    parse_config,
)
from .kernel import (  # noqa: F401
    INF_TIME,
    MS,
    NS,
    PS,
    SEC,
    US,
    Event,
    EventQueue,
    RngRegistry,
    Scheduler,
    SchedulingInPast,
    UnknownEntity,
)
from .report import (  # noqa: F401
    MismatchedConfig,
    compare,
    read_run_dir,
    write_comparison,
    write_run_dir,
)
from .runner import RunnerError, merged_trace, run  # noqa: F401
