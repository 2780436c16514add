"""Geometric GNN multi-robot path planning from lidar, trained on A* expert labels."""
__version__ = "0.1.0"
