"""nerfkit: CPU neural radiance fields for static and time-varying scenes."""

__version__ = "0.1.0"
