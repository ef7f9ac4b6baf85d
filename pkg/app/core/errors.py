"""Exceptions métier de la segmentation multi-tissus"""
from typing import Optional


class ThighSegError(Exception):
    """Erreur de base du projet"""

    exit_code = 1


class ConfigurationError(ThighSegError):
    """Configuration, paramètres ou entrées invalides"""

    exit_code = 2


class ShapeError(ConfigurationError):
    """Dimensions de tenseurs incompatibles"""


class ContractError(ThighSegError):
    """Violation d'un contrat d'appel (pré-condition non respectée)"""

    exit_code = 2


class EmptyLossError(ContractError):
    """Tous les pixels sont ignorés, la perte n'est pas définie"""


class DegenerateError(ThighSegError):
    """Variance ou histogramme dégénéré"""

    exit_code = 2


class NoForegroundError(DegenerateError):
    """Image sans aucun pixel d'avant-plan"""


class ParseError(ConfigurationError):
    """Fichier illisible ou corrompu

    Args:
        message: Description du problème
        offset: Position (en octets) où la lecture a échoué
    """

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (octet {offset})"
        super().__init__(message)


class LabelRangeError(ParseError):
    """Valeur d'étiquette hors de l'énumération des tissus"""

    def __init__(self, value: int, offset: Optional[int] = None):
        self.value = value
        super().__init__(f"Valeur d'étiquette invalide: {value}", offset)


class ProtocolError(ConfigurationError):
    """Protocole d'entraînement impossible à exécuter"""


class LeakageError(ProtocolError):
    """Une coupe de validation ou de test a atteint un pas de gradient"""


class NumericError(ThighSegError):
    """Valeur non finie pendant l'entraînement"""

    exit_code = 3

    def __init__(self, message: str, batch_id: Optional[str] = None):
        self.batch_id = batch_id
        super().__init__(message)
