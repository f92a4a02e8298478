#!/usr/bin/env python3
"""
matgan_logger.py - Shared logging setup for matgan3d.

All modules import from here so that logging is consistent and a run always
leaves a discoverable log file behind, whichever subcommand started it.

Log file location (in priority order):
  1. $MATGAN_LOG_DIR/matgan.log      (user-defined override)
  2. ./logs/matgan.log               (next to the run)
  3. <system temp>/matgan.log        (fallback for read-only checkouts)
"""

import os
import sys
import logging
import tempfile
import traceback
from logging.handlers import RotatingFileHandler

ROOT_NAME = "MaterialGAN"

# ── Determine a writable log directory ───────────────────────────────────────

def _resolve_log_dir() -> str:
    candidates = [
        os.environ.get("MATGAN_LOG_DIR", ""),       # user override
        os.path.join(os.getcwd(), "logs"),          # per-run directory
        tempfile.gettempdir(),                      # last resort
    ]
    for path in candidates:
        if not path:
            continue
        try:
            os.makedirs(path, exist_ok=True)
            probe = os.path.join(path, ".probe")
            with open(probe, "w") as f:
                f.write("ok")
            os.unlink(probe)
            return path
        except OSError:
            continue
    return tempfile.gettempdir()


# ── Formatter ─────────────────────────────────────────────────────────────────

class PlainFormatter(logging.Formatter):
    """Human-readable log lines, easy to grep."""
    FMT = "%(asctime)s  [%(levelname)-8s]  %(name)s - %(message)s"
    DATEFMT = "%Y-%m-%d %H:%M:%S"

    def __init__(self):
        super().__init__(fmt=self.FMT, datefmt=self.DATEFMT)

    def formatException(self, ei):
        """Include full traceback in the log."""
        return "".join(traceback.format_exception(*ei)).rstrip()


# ── Setup function ─────────────────────────────────────────────────────────────

_configured = False
LOG_FILE = None

def setup(name: str = ROOT_NAME, level: int = logging.DEBUG,
          console_level: int = logging.INFO) -> logging.Logger:
    """
    Call once from the CLI entry point.
    Returns the root-level 'MaterialGAN' logger.
    All child loggers (MaterialGAN.moments, etc.) inherit handlers automatically.
    """
    global _configured, LOG_FILE
    root = logging.getLogger(name)
    if _configured:
        return root

    root.setLevel(level)
    LOG_FILE = os.path.join(_resolve_log_dir(), "matgan.log")

    # 1. Rotating file handler, last 5 × 10 MB of logs
    try:
        fh = RotatingFileHandler(
            LOG_FILE,
            maxBytes=10 * 1024 * 1024,   # 10 MB
            backupCount=5,
            encoding="utf-8",
        )
        fh.setLevel(logging.DEBUG)
        fh.setFormatter(PlainFormatter())
        root.addHandler(fh)
    except OSError as e:
        print(f"[matgan_logger] WARNING: Cannot open log file {LOG_FILE}: {e}", file=sys.stderr)

    # 2. Console handler on stderr; stdout carries command results
    ch = logging.StreamHandler(sys.stderr)
    ch.setLevel(console_level)
    ch.setFormatter(PlainFormatter())
    root.addHandler(ch)

    _configured = True

    root.debug("=" * 60)
    root.debug("  matgan3d startup")
    root.debug(f"  Log file: {LOG_FILE}")
    root.debug(f"  Python:   {sys.executable}")
    root.debug(f"  PID:      {os.getpid()}")
    root.debug(f"  CWD:      {os.getcwd()}")
    root.debug("=" * 60)

    return root


def get(module_name: str) -> logging.Logger:
    """Get a child logger. Safe to call before setup()."""
    return logging.getLogger(f"{ROOT_NAME}.{module_name}")
