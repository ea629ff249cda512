"""Cooperative and competitive mean-field equilibria for electricity
producers under a carbon tax, with Stackelberg policy search for the
regulator and Monte Carlo verification of the analytic solutions."""

__version__ = "0.1.0"
