"""Module Features - Entraînement, évaluation et protocoles expérimentaux"""
