"""Unit tests for DEBUG output and the shutdown flag."""
import importlib
import os
import signal
import sys
from unittest.mock import patch

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import console


@pytest.mark.unit
class TestDebugMode:
    """Tests for DEBUG mode functionality."""

    def test_debug_print_outputs_when_enabled(self, capsys):
        """Test that debug_print outputs when DEBUG mode is enabled."""
        with patch('console.DEBUG_MODE', True):
            console.debug_print("DEBUG: epoch 3")
        assert "DEBUG: epoch 3" in capsys.readouterr().out

    def test_debug_print_no_output_when_disabled(self, capsys):
        """Test that debug_print does not output when DEBUG mode is disabled."""
        with patch('console.DEBUG_MODE', False):
            console.debug_print("DEBUG: epoch 3")
        assert capsys.readouterr().out == ""

    @pytest.mark.parametrize("value,expected", [
        ("true", True), ("1", True), ("yes", True), ("on", True), ("TRUE", True),
        ("false", False), ("0", False), ("", False),
    ])
    def test_debug_mode_parsing(self, value, expected):
        """DEBUG accepts true/1/yes/on in any case; it is read once at import."""
        try:
            with patch.dict(os.environ, {'DEBUG': value}, clear=False):
                importlib.reload(console)
                assert console.DEBUG_MODE is expected
        finally:
            importlib.reload(console)


@pytest.mark.unit
class TestShutdownFlag:
    """Tests for graceful shutdown handling."""

    def test_request_and_reset(self):
        assert not console.shutdown_requested()
        console.request_shutdown()
        assert console.shutdown_requested()
        console.reset_shutdown()
        assert not console.shutdown_requested()

    def test_signal_handler_sets_flag(self, capsys):
        """SIGINT/SIGTERM only set the flag; work stops at the next step boundary."""
        console._signal_handler(signal.SIGTERM, None)
        assert console.shutdown_requested()
        assert "Shutdown signal received" in capsys.readouterr().out

    def test_install_registers_both_signals(self):
        with patch('console.signal.signal') as mock_signal:
            console.install_signal_handlers()
        registered = {c.args[0] for c in mock_signal.call_args_list}
        assert registered == {signal.SIGINT, signal.SIGTERM}
