"""
Core modules.

Network maths, the ARMED model, posterior samplers, synthetic data,
statistics and experiment orchestration.
"""
