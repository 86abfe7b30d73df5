"""Frame-recurrent video super-resolution with multi-coordinate motion compensation."""

__version__ = "0.1.0"
