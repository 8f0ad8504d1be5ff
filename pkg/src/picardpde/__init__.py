"""Picard-type iteration for initial value problems of heat- and wave-type PDEs."""

__version__ = "0.1.0"
