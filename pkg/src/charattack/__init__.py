"""Character-level neural machine translation with white-box and black-box adversarial attacks."""

__version__ = "0.1.0"
