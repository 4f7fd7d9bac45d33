"""Self-supervised multi-modality image fusion with learned pseudo-sensing
modules and an equivariance loss, sized to train on a CPU in minutes."""

from importlib import metadata

try:
    __version__ = metadata.version("artifact")
except metadata.PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"
