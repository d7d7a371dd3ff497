"""Exception types shared across the package."""


class PagedKvError(Exception):
    """Base class for all pagedkv errors."""


class CapacityExhausted(PagedKvError):
    """The pool cannot supply the requested number of pages."""


class DuplicateSequence(PagedKvError):
    """A block table already exists for this sequence id."""


class UnknownSequence(PagedKvError):
    """No block table exists for this sequence id."""


class InvalidPrefix(PagedKvError):
    """Fork prefix exceeds the parent's logical length."""


class OutOfRange(PagedKvError):
    """A token position or length is outside the valid range."""


class ShapeMismatch(PagedKvError):
    """Array arguments do not have the expected shape."""


class NoAllowedKeys(PagedKvError):
    """A query has zero allowed keys; silent zero outputs would hide bugs."""


class InvalidTrace(PagedKvError):
    """A workload trace references sequences inconsistently."""


class ConfigError(PagedKvError):
    """A run configuration failed validation."""
