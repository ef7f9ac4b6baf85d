"""Données: images multi-contrastes, fantômes et format MCSL"""
