"""Importance-based neuron allocation for multilingual translation.

Thin wrapper re-exporting the compiled extension. The extension lives next
to this package when installed (scikit-build-core places it inside the
package directory) and on PYTHONPATH during in-tree test runs.
"""

try:
    from ._neuronalloc import *  # noqa: F401,F403
    from ._neuronalloc import __version__  # noqa: F401
except ImportError:
    from _neuronalloc import *  # noqa: F401,F403
    from _neuronalloc import __version__  # noqa: F401
