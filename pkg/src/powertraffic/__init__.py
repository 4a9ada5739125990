"""Co-simulation of a radial feeder and a road network coupled by EV stations."""

__version__ = "0.1.0"
