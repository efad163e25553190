"""Configuration, data models and exceptions"""
