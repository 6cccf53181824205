"""Traffic-scenario clustering with random-forest activation-pattern similarity."""
__version__ = "0.1.0"
