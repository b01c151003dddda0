"""Lower and upper values of zero-sum differential games with hysteresis switching."""

__version__ = "0.1.0"
