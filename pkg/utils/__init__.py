"""Stackcast utilities: configuration, run ledger, storage and synthetic data"""
