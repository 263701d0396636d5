"""Trace-driven simulator of EPT-based memory-access monitoring.

A guest (4-level page tables, several vCPUs) runs a trace of memory accesses.
A monitor holds two EPT views per vCPU and logs accesses from SRC code to DST
data at byte granularity; a page-fault based backend is modelled for
comparison.
"""

from .engine import AccessEvent, Engine, Load, MachineConfig, MapIn, MapOut, RunReport, TlbFlush, run_trace
from .formats import parse_config, parse_trace
from .logkit import LogRecord, SymbolMap, format_raw, parse_raw, symbolize
from .ranges import AddressRange, Policy, RangeConfig

__all__ = [
    "AccessEvent", "AddressRange", "Engine", "Load", "LogRecord", "MachineConfig", "MapIn", "MapOut",
    "Policy", "RangeConfig", "RunReport", "SymbolMap", "TlbFlush", "format_raw", "parse_config",
    "parse_raw", "parse_trace", "run_trace", "symbolize",
]
__version__ = "0.1.0"
