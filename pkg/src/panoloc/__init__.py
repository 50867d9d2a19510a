"""panoloc: visual relocalization in LiDAR intensity maps.

Builds a database of intensity panoramas from a point cloud and a mapping
trajectory, then localizes monocular grayscale queries against it with
coarse retrieval followed by 2D-3D association and PnP+RANSAC.
"""

__version__ = "0.1.0"

__all__ = ["CrossModalRelocalizer", "__version__"]


def __getattr__(name):
    if name == "CrossModalRelocalizer":
        from panoloc.estimator import CrossModalRelocalizer

        return CrossModalRelocalizer
    raise AttributeError(name)
