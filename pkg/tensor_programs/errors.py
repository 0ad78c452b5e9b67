class ProgramError(ValueError):
    """
    A tensor program is structurally invalid or cannot be processed.
    """


class ParseError(ProgramError):
    """
    Syntax error in the program DSL, located by 1-based line and column.
    """

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        location = ""
        if line is not None:
            location = f"line {line}"
            if column is not None:
                location += f", column {column}"
            location += ": "
        super().__init__(f"{location}{message}")


class NumericError(ArithmeticError):
    """
    A numeric routine could not produce a trustworthy value.
    """


class MissingDerivative(NumericError):
    pass
