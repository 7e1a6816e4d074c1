"""Two-stage stair-climbing RL pipeline on procedural stair heightfields."""

__version__ = "0.1.0"
