"""Stackcast agents: stage orchestration"""
