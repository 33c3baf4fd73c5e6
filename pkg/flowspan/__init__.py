from .impl.exceptions import FlowspanException

__all__ = ("FlowspanException",)
