"""Structured logging for engine components."""

import json
import time
from typing import Any, Literal

from logger import log

LogLevel = Literal["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]


class EngineLogger:
    """
    Component logger with context prefix and structured payloads.

    Messages render as ``[component:context] [LEVEL] message``; an optional data
    dict follows as a separate ``DATA: {json}`` line at the same level.
    """

    def __init__(self, component: str, context: str | None = None):
        self.component = component
        self.context = context
        self._start_ns = time.perf_counter_ns()
        self._log_count = 0

    def _format_message(self, message: str, level: LogLevel) -> str:
        prefix = f"[{self.component}:{self.context}]" if self.context else f"[{self.component}]"
        return f"{prefix} [{level}] {message}"

    def debug(self, message: str, data: dict[str, Any] | None = None) -> None:
        self._log("DEBUG", message, data)

    def info(self, message: str, data: dict[str, Any] | None = None) -> None:
        self._log("INFO", message, data)

    def warning(self, message: str, data: dict[str, Any] | None = None) -> None:
        self._log("WARNING", message, data)

    def error(self, message: str, data: dict[str, Any] | None = None) -> None:
        self._log("ERROR", message, data)

    def _log(self, level: LogLevel, message: str, data: dict[str, Any] | None = None) -> None:
        log(self._format_message(message, level), level=level)
        self._log_count += 1
        if data:
            try:
                log(f"DATA: {json.dumps(data, sort_keys=True)}", level=level)
            except (TypeError, ValueError):
                log("DATA: (unserializable data)", level=level)

    def log_event(self, event_type: str, data: dict[str, Any]) -> None:
        """Log a named event (cache capture, step skip, ...) with its payload."""
        self.info(
            f"EVENT: {event_type}",
            {"component": self.component, "context": self.context, "event_type": event_type, "data": data},
        )

    def log_performance(
        self, operation: str, duration_ns: int, details: dict[str, Any] | None = None
    ) -> None:
        """
        Log a timing measurement.

        Args:
            operation: Name of the measured operation
            duration_ns: Duration in nanoseconds (monotonic clock)
            details: Additional fields merged into the payload
        """
        perf_data: dict[str, Any] = {
            "operation": operation,
            "duration_ns": int(duration_ns),
            "component": self.component,
        }
        if details:
            perf_data.update(details)
        self.debug(f"PERF: {operation} took {duration_ns / 1e6:.3f}ms", perf_data)

    def get_log_stats(self) -> dict[str, Any]:
        return {
            "component": self.component,
            "context": self.context,
            "log_count": self._log_count,
            "uptime_ns": time.perf_counter_ns() - self._start_ns,
        }


def create_engine_logger(component: str, context: str | None = None) -> EngineLogger:
    return EngineLogger(component, context)
