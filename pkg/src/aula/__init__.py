"""Slide decks in, live multi-agent classrooms out.

Subsystems: the teaching-action markup (`script`), the lecture package
format (`package`), the provider gateway (`providers`), material
retrieval (`rag`), deck compilation (`pipeline`), the live classroom
state machine (`session`), transcript persistence (`transcript`),
metrics (`analytics`), and the HTTP service + CLI (`service`, `cli`).
"""

from .errors import AulaError

__all__ = ["AulaError"]
__version__ = "0.1.0"
