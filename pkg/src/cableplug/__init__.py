"""Cable modeling, pose alignment and plug-task simulation."""

__version__ = "0.1.0"
