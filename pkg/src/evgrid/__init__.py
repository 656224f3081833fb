"""Vehicle-to-grid energy trading on a simulated motorway.

Modules, bottom-up: ``ev_model`` (per-route energy), ``mobility`` (traffic),
``renewables`` (wind and PV), ``optimizer`` (grid dispatch), ``game``
(participation incentives), ``bounds`` (closed-form estimates) and
``harness`` (end-to-end rounds and sweeps).
"""
__version__ = "0.1.0"
