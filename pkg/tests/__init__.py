"""Tests for the mmdr CLI and library."""
