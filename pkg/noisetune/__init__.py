"""
noisetune

Learns the noise variances of planar (SE(2)) navigation factor graphs with the smoother in the
loop:
  * an incremental Gauss-Newton smoother with fluid relinearization and partial updates,
  * a finite-difference learner that differentiates the smoother's MAP estimate with respect to
    the variances and descends on the tracking error against ground truth,
  * the LEO energy-based baseline, which learns from posterior samples instead, and
  * synthetic datasets plus an experiment harness comparing the two.

Training methods reach the harness through ``register(manager)``, advertised in the
``noisetune.methods`` entry-point group; other packages can add methods the same way.
"""

import logging

__version__ = "0.1.0"

logger = logging.getLogger(__name__)


def register(manager):
    """Register the built-in training methods (``noisetune.methods`` group)."""
    logger.debug("registering built-in methods")
    from .harness import train_leo, train_ours

    manager.declare_dependency("cereggii")
    manager.add_method(
        "ours",
        train_ours,
        train_split="train",
        description="finite-difference gradient of the tracking loss through the smoother",
    )
    # LEO samples on the longer training trajectories.
    manager.add_method(
        "leo",
        train_leo,
        train_split="train_long",
        description="contrastive energy loss over posterior samples",
    )
