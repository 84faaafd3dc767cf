"""Exception hierarchy and CLI exit codes."""

from __future__ import annotations

EXIT_CONFIG = 2
EXIT_CONVERGENCE = 3
EXIT_TRUNCATED = 4


class MetameshError(Exception):
    exit_code = 1
    kind = "error"

    def report(self) -> dict:
        """Machine-readable form used by the CLI error report."""
        return {"error": self.kind, "message": str(self), "exit_code": self.exit_code}


class ConfigError(MetameshError, ValueError):
    exit_code = EXIT_CONFIG
    kind = "config_error"


class BundleError(ConfigError):
    kind = "bundle_error"


class ConvergenceError(MetameshError, RuntimeError):
    exit_code = EXIT_CONVERGENCE
    kind = "convergence_error"

    def __init__(self, message: str, residual: float, iterations: int) -> None:
        super().__init__(f"{message} (residual {residual:.3e} after {iterations} iterations)")
        self.residual = residual
        self.iterations = iterations

    def report(self) -> dict:
        data = super().report()
        data["residual"] = self.residual
        data["iterations"] = self.iterations
        return data


class PolicyProtocolError(MetameshError, RuntimeError):
    kind = "policy_protocol_error"
