"""Desk-scale mixed-autonomy fleet testbed.

Subpackages: :mod:`fleetsim.road` (loop geometry), :mod:`fleetsim.dynamics`
(car following and control arbitration), :mod:`fleetsim.server` (central fleet
server and wire client), :mod:`fleetsim.analytics` (density, counts,
penetration), :mod:`fleetsim.harness` (scenarios, simulation loop, replay,
CLI).
"""

__version__ = "0.1.0"
