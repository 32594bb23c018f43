"""Full-reference point cloud quality assessment from multi-scale RBF coefficient differences."""

__version__ = "0.1.0"
