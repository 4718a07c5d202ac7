"""
Stackcast Errors
Exception hierarchy shared by the numerical modules and the CLI
"""

from typing import Iterable, Optional


class StackcastError(Exception):
    """Base class for every domain error raised by Stackcast"""


# Dataset / core

class NonFiniteValue(StackcastError, ValueError):
    def __init__(self, item_id: str, index: int):
        self.item_id = item_id
        self.index = index
        super().__init__(f"Non-finite value in series '{item_id}' at index {index}")


class DuplicateItemId(StackcastError, ValueError):
    def __init__(self, item_id: str):
        self.item_id = item_id
        super().__init__(f"Duplicate item_id '{item_id}'")


class EmptySeries(StackcastError, ValueError):
    def __init__(self, item_id: str):
        self.item_id = item_id
        super().__init__(f"Series '{item_id}' has no observations")


class EmptyAfterFilter(StackcastError, ValueError):
    def __init__(self, min_length: int):
        self.min_length = min_length
        super().__init__(f"No series has at least {min_length} observations")


class InvalidTask(StackcastError, ValueError):
    pass


# Losses

class SeriesTooShort(StackcastError, ValueError):
    def __init__(self, length: int, m: int):
        self.length = length
        self.m = m
        super().__init__(f"Seasonal error needs more than m={m} observations, got {length}")


class ZeroScale(StackcastError, ArithmeticError):
    def __init__(self, item_id: str = ""):
        self.item_id = item_id
        super().__init__(f"Seasonal scale is zero for item '{item_id}'")


class AllItemsExcluded(StackcastError, ArithmeticError):
    def __init__(self, n_items: int):
        self.n_items = n_items
        super().__init__(f"All {n_items} items were excluded (zero seasonal scale)")


# Base learners and external forecasts

class InsufficientHistory(StackcastError, ValueError):
    def __init__(self, kind: str, length: int, required: int):
        self.kind = kind
        self.length = length
        self.required = required
        super().__init__(f"{kind} needs at least {required} observations, got {length}")


class ExternalFileMissing(StackcastError, FileNotFoundError):
    def __init__(self, path):
        self.path = path
        super().__init__(f"External forecast file not found: {path}")


class SchemaMismatch(StackcastError, ValueError):
    def __init__(self, message: str, items: Optional[Iterable[str]] = None):
        self.items = sorted(items) if items else []
        if self.items:
            message = f"{message}: {', '.join(self.items)}"
        super().__init__(message)


class ShapeMismatch(StackcastError, ValueError):
    pass


# Cross-validation

class InsufficientLength(StackcastError, ValueError):
    def __init__(self, length: int, k_folds: int, horizon: int, min_train: int = 0):
        self.length = length
        self.k_folds = k_folds
        self.horizon = horizon
        self.min_train = min_train
        super().__init__(
            f"Series of length {length} cannot hold K={k_folds} windows of H={horizon} "
            f"with at least {min_train} training points"
        )


class LearnerFailure(StackcastError, RuntimeError):
    def __init__(self, fold: int, model: str, item_id: str, cause: Exception):
        self.fold = fold
        self.model = model
        self.item_id = item_id
        self.cause = cause
        super().__init__(f"Base learner '{model}' failed on item '{item_id}' in fold {fold}: {cause}")


# Optimizer

class NonFiniteLoss(StackcastError, ArithmeticError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"Objective returned a non-finite loss at step {step}")


class NonFiniteGradient(StackcastError, ArithmeticError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"Objective returned a non-finite gradient at step {step}")


# Multi-layer

class InsufficientFolds(StackcastError, ValueError):
    def __init__(self, k_folds: int):
        self.k_folds = k_folds
        super().__init__(f"L3 training needs K >= 2 validation windows, got K={k_folds}")


# Evaluation

class MissingCell(StackcastError, ValueError):
    def __init__(self, method: str, dataset: str):
        self.method = method
        self.dataset = dataset
        super().__init__(f"No score for method '{method}' on dataset '{dataset}'")


class ZeroBaseline(StackcastError, ArithmeticError):
    def __init__(self, dataset: str):
        self.dataset = dataset
        super().__init__(f"Baseline error is zero on dataset '{dataset}'")


# Files

class ParseError(StackcastError, ValueError):
    def __init__(self, line: int, message: str):
        self.line = line
        super().__init__(f"Parse error at line {line}: {message}")


class IrregularSpacing(StackcastError, ValueError):
    def __init__(self, item_id: str):
        self.item_id = item_id
        super().__init__(f"Timestamps of item '{item_id}' are not regularly spaced")


class UnknownSchemaVersion(StackcastError, ValueError):
    def __init__(self, path, found: str, expected: str):
        self.path = path
        self.found = found
        self.expected = expected
        super().__init__(f"{path}: unknown schema '{found}' (expected '{expected}')")


# Configuration

class InvalidConfig(StackcastError, ValueError):
    def __init__(self, message: str, key: Optional[str] = None):
        self.key = key
        super().__init__(f"Invalid configuration: {message}")
