"""Context-aware semantic safety filtering for mobile robots.

Modules: ``world`` (scenarios and ground truth), ``sensor`` (rendering and the
detection oracle), ``grounding`` (predicates to a barrier function),
``safety_filter`` (CBF-QP), ``certificate`` (perception risk bounds), ``sim``
(closed-loop episodes) and ``cli``.
"""

from .predicate import Predicate

__version__ = "0.1.0"

__all__ = ["Predicate", "__version__"]
