"""memsieve: memory-dump scanning for hidden executable code."""
from __future__ import annotations

__version__ = "0.1.0"
TOOLKIT = f"memsieve {__version__}"
