"""Event-driven simulator of an intermittent-contact atomic force microscope.

Submodules: ``model`` (cantilever, tip-sample force, piezo), ``sim``
(integrator and impact handling), ``demod`` (amplitude demodulation),
``control`` (PID variants, hybrid automaton, speed regulator, predictive
feedforward), ``sample`` (surfaces) and ``harness`` (experiments, metrics,
CLI).
"""

__version__ = "0.1.0"
