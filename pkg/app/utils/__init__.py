"""Module Utils - Configuration, empreintes et graines"""

from .hashing import (
    get_array_hash,
    parameter_hash,
    derive_seed
)

__all__ = [
    'get_array_hash',
    'parameter_hash',
    'derive_seed'
]
