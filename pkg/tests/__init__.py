"""Tests for stochastic-l2-gain."""
