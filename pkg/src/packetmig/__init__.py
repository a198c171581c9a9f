"""Wave-packet based reverse-time continuation and RTM imaging."""

__version__ = "0.1.0"
