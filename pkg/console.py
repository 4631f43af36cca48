import os
import signal

# Check if debug mode is enabled (via DEBUG environment variable)
# Defaults to False if not set or empty
DEBUG_MODE = os.getenv("DEBUG", "").lower() in ("true", "1", "yes", "on")

# Global flag for graceful shutdown
_shutdown_requested = False

SHUTDOWN_MESSAGE = "Shutdown requested, stopping after the current step..."


def debug_print(*args, **kwargs):
    """Print debug messages only if DEBUG mode is enabled.
    Works exactly like print() but only outputs when DEBUG environment variable is set."""
    if DEBUG_MODE:
        print(*args, **kwargs)


def shutdown_requested():
    """True once SIGINT/SIGTERM has been received."""
    return _shutdown_requested


def request_shutdown():
    global _shutdown_requested
    _shutdown_requested = True


def reset_shutdown():
    """Clear the shutdown flag (used between independent runs in one process)."""
    global _shutdown_requested
    _shutdown_requested = False


def _signal_handler(signum, frame):
    """Handle shutdown signals gracefully."""
    request_shutdown()
    print("\nShutdown signal received, finishing current operation...")


def install_signal_handlers():
    signal.signal(signal.SIGTERM, _signal_handler)
    signal.signal(signal.SIGINT, _signal_handler)
