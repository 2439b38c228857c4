"""Direct sparse visual odometry for fisheye cameras with FoV above 180 degrees."""

__version__ = "0.1.0"
