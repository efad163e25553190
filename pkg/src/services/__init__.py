"""Numerical services: tensors, meshes, finite elements, forward and inverse solvers"""
