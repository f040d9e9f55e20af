"""Single-step memory AMP for invariant sensing matrices."""
__version__ = "0.1.0"
