"""Exception hierarchy shared by every stage of the pipeline."""


class UPLError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(UPLError):
    """Invalid configuration, flag, or hyperparameter."""


class InputError(UPLError):
    """Malformed or inconsistent input data."""


class VocabularyLookupError(InputError, KeyError):
    """A token or class name is missing from the vocabulary."""

    def __init__(self, name, suggestions=()):
        self.name = name
        self.suggestions = list(suggestions)
        hint = f"; nearest tokens: {', '.join(self.suggestions)}" if self.suggestions else ""
        super().__init__(f"{name!r} is not in the vocabulary{hint}")

    def __str__(self):
        return self.args[0]


class CorruptionError(InputError):
    """A persisted file failed its integrity check."""


class TagMismatchError(ConfigError):
    """Features were produced by a different encoder than the one requested."""


class EmptySelectionError(UPLError):
    """Pseudo-label selection kept no samples."""
