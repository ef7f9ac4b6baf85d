"""Prétraitement IRM: biais, diffusion, standardisation"""
