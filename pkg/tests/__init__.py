"""
Test suite for medl-uq.

Contains unit tests, integration tests, and smoke tests.
"""
