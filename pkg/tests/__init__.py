"""Tests for py-fedpoison."""
