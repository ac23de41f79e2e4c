"""Stochastic reaction-diffusion simulation on unstructured meshes."""
