"""Component-based reduced-order solver for 2D plane-strain elasticity.

Assemblies are built from pre-trained archetype components coupled through
interface ports.  Systems containing a rotated component are synthesized
online by regenerating a thin buffer-layer mesh between the rotated body and
its stationary neighbour and recomputing that component's interior response
through a 2x2 block-inverse identity around the body's pre-factorized
operator.
"""

__version__ = "0.1.0"
