"""Double-directional channel dataset synthesis and statistics-matched
sequence generation."""

from . import adtensor, chanstats, config, gscm, htransformer, trainer

__version__ = "0.1.0"

__all__ = ["adtensor", "chanstats", "config", "gscm", "htransformer",
           "trainer", "__version__"]
