"""Audit toolkit for the IKEv2 phase-1 key exchange of VoWiFi ePDG endpoints."""

from __future__ import annotations

import os
from pathlib import Path

__version__ = "0.1.0"
SCHEMA_VERSION = 1

_PACKAGE_DATA = Path(__file__).with_name("data")


def data_file(name: str) -> Path:
    """Locate a shipped data file; ``EPDG_AUDIT_DATA`` overrides the directory."""
    override = os.environ.get("EPDG_AUDIT_DATA")
    if override:
        candidate = Path(override) / name
        if candidate.exists():
            return candidate
    return _PACKAGE_DATA / name
