"""Exception hierarchy shared by the library and the CLI.

Each class carries the process exit code the CLI maps it to.
"""


class GlareError(Exception):
    exit_code = 1


class UsageError(GlareError):
    exit_code = 2


class GlareIOError(GlareError):
    exit_code = 3


class SchemaError(GlareError):
    exit_code = 4


class DimensionError(SchemaError, ValueError):
    pass


class NumericError(GlareError, ArithmeticError):
    exit_code = 5


class DegenerateInputError(GlareError, ValueError):
    exit_code = 4


class InvariantError(GlareError, RuntimeError):
    exit_code = 6
