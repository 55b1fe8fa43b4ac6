"""Exception hierarchy shared by every dynlite module."""


class DynliteError(Exception):
    """Base class for all errors raised by dynlite."""


# -- symbolic algebra ---------------------------------------------------------

class SymExprError(DynliteError):
    pass


class ExprSyntaxError(SymExprError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at offset {offset})")
        self.offset = offset


class NotDivisible(SymExprError):
    pass


class ZeroDivisor(SymExprError):
    pass


class UnboundSymbol(SymExprError):
    def __init__(self, symbol):
        super().__init__(f"symbol {symbol!r} has no binding")
        self.symbol = symbol


# -- graph IR -----------------------------------------------------------------

class GraphError(DynliteError):
    pass


class SchemaError(GraphError):
    def __init__(self, path, reason):
        super().__init__(f"{path}: {reason}")
        self.path = path
        self.reason = reason


class CycleError(GraphError):
    pass


class UnknownOperator(GraphError):
    pass


class UndeclaredSymbol(GraphError):
    def __init__(self, symbol):
        super().__init__(f"undeclared symbol {symbol!r}")
        self.symbol = symbol


class ShapeArityError(GraphError):
    pass


class ConfigError(GraphError):
    pass


class MetadataMissing(GraphError):
    pass


# -- shape inference / scheduling ----------------------------------------------

class ShapeInferenceError(DynliteError):
    def __init__(self, message, node_id=None):
        if node_id is not None:
            message = f"node {node_id}: {message}"
        super().__init__(message)
        self.node_id = node_id


class RankMismatch(ShapeInferenceError):
    pass


class BroadcastError(ShapeInferenceError):
    pass


class NonDivisibleReshape(ShapeInferenceError):
    pass


class UnsupportedDynamicAttr(ShapeInferenceError):
    pass


class ScheduleCycle(ShapeInferenceError):
    pass


# -- binding / memory ---------------------------------------------------------

class BindError(DynliteError):
    pass


class NonPositiveDim(BindError):
    pass


class ExceedsPreallocation(BindError):
    pass


# -- quantization ---------------------------------------------------------------

class QuantError(DynliteError):
    pass


class NonFinite(QuantError):
    pass


class OddPackingError(QuantError):
    pass


class BadMagic(QuantError):
    pass


class TruncatedStream(QuantError):
    pass


class SchemeUnsupported(QuantError):
    pass


# -- KV cache / execution --------------------------------------------------------

class KVCacheError(DynliteError):
    pass


class CapacityExceeded(KVCacheError):
    pass


class PositionMismatch(KVCacheError):
    pass


class ShapeMismatch(DynliteError):
    def __init__(self, message, node_id=None):
        if node_id is not None:
            message = f"node {node_id}: {message}"
        super().__init__(message)
        self.node_id = node_id
