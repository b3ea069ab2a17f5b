"""Exception hierarchy shared by all analysis stages."""


class ScanError(Exception):
    """Base class for every error raised by sbpfscan."""


class LoadError(ScanError):
    """The ELF container is malformed."""

    def __init__(self, structure, message):
        self.structure = structure
        super().__init__(f"{structure}: {message}")


class UnsupportedTargetError(LoadError):
    pass


class RelocationError(LoadError):
    def __init__(self, offset, message):
        self.offset = offset
        super().__init__("relocation", f"{message} (offset {offset:#x})")


class DecodeError(ScanError):
    def __init__(self, address, opcode, message="illegal opcode"):
        self.address = address
        self.opcode = opcode
        super().__init__(f"{message} {opcode:#04x} at {address:#x}")


class AssemblerError(ScanError):
    def __init__(self, line_no, message):
        self.line_no = line_no
        super().__init__(f"line {line_no}: {message}")


class MalformedTargetError(ScanError):
    def __init__(self, address, target):
        self.address = address
        self.target = target
        super().__init__(f"branch at {address:#x} targets {target:#x} outside the text section")


class ConfigurationError(ScanError):
    """Invalid analysis setup (unknown syscall, impossible input layout, bad flags)."""


class MergeRefused(ScanError):
    """States cannot be merged; the caller keeps them separate."""


class SequencingError(ScanError):
    pass


class ContradictionError(ScanError):
    """Concretization requested on unsatisfiable constraints."""


class ConcretizationTimeout(ScanError):
    pass


class SolverFailure(ScanError):
    pass
