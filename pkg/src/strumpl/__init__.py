"""Multi-task dense regression under disjoint partial supervision with
missing-not-at-random labels and a learnable inter-task physical constraint,
trained and evaluated on synthetic worlds with known ground truth."""

__version__ = "0.1.0"
