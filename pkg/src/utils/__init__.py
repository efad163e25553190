"""Logging and artifact export utilities"""
