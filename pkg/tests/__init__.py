"""Test package for stl-sdt."""
