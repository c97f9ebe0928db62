"""
Time-domain audio source separation with wavelet down/up-sampling layers.
"""

### stdlib imports
import importlib.metadata

try:
    __version__ = importlib.metadata.version("python-spgill-wavesep")
except importlib.metadata.PackageNotFoundError:
    __version__ = "0.0.0"
