"""Audio-driven mouth re-synthesis on top of a linear 3D face model.

Subpackages are plain modules; start from :mod:`ebt.pipeline` for the
end-to-end flow or :mod:`ebt.cli` for the command line.
"""

__version__ = "0.1.0"
