"""Desk-scale matrix-free ALE hydrodynamics mini-app.

Three-phase pipeline (Lagrange, mesh optimization, remap) on high-order
tensor-product finite elements, with a teams-style kernel execution layer,
an arena memory pool, and benchmark harnesses for complexity, throughput
and thread-scaling studies.
"""

__version__ = "0.1.0"
