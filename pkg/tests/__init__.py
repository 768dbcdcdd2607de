"""Tests for the noisebridge package."""
