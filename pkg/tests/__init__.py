"""
Tests for trajguard.
"""
