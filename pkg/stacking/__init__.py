"""Stackcast numerical library: panels, losses, base learners, cross-validation, stackers and evaluation"""
