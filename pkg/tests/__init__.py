"""Test package for ccmc-lab."""
