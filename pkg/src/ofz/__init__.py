"""Oracle-first coverage-guided fuzzing over a deterministic bytecode VM."""

__version__ = "0.1.0"
