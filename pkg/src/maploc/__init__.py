"""Prior-map-assisted LiDAR localization toolkit."""

__version__ = "0.1.0"
