"""Map exceptions raised by the click CLI commands to reports and exit codes"""

import click

from switchid.ekf import FilterDivergenceError
from switchid.model import SwitchidError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_IO = 2
EXIT_DEGRADED = 3
EXIT_VALIDATION = 4


def exit_code_for(exc: BaseException) -> int:
    """Exit code of an exception raised while running a command"""
    if isinstance(exc, FilterDivergenceError):
        return EXIT_DEGRADED
    if isinstance(exc, SwitchidError):
        return EXIT_VALIDATION
    if isinstance(exc, OSError):
        return EXIT_IO
    return EXIT_USAGE


def catch_all_exceptions(cls, handler):  # noqa
    """Catch exceptions raised by a click CLI command to report them and set the exit code.

    Usage errors keep the click behaviour (usage text) with exit code 1; any
    other exception is passed to ``handler(cmd, info_name, exc)`` and turned
    into a clean exit with the code of :func:`exit_code_for`.

    Credits to https://stackoverflow.com/questions/52213375/python-click-exception-handling-under-setuptools
    """

    class Cls(cls):
        """Override Click Class (can be either Command or Group) with custom invoke and context handlers"""

        _original_args = None

        def make_context(self, info_name, args, parent=None, **extra):
            """Add custom exception handler to the click CLI context."""
            # grab the original command line arguments
            self._original_args = " ".join(args)
            try:
                return super(Cls, self).make_context(info_name, args, parent=parent, **extra)
            except Exception as exc:
                raise _handle(self, info_name, exc, handler)

        def invoke(self, ctx):
            """Add custom exception handler to the click CLI invoke."""
            try:
                return super(Cls, self).invoke(ctx)
            except Exception as exc:
                raise _handle(self, ctx.info_name, exc, handler)

    return Cls


def _handle(cmd, info_name, exc, handler):
    if isinstance(exc, (click.exceptions.Exit, click.exceptions.Abort)):
        return exc
    if isinstance(exc, click.UsageError):
        exc.exit_code = EXIT_USAGE
        return exc
    handler(cmd, info_name, exc)
    return click.exceptions.Exit(exit_code_for(exc))


def report_click_exception(cmd, info_name, exc):
    """Echo a failed CLI routine to stderr, used as handler for click applications

    Parameters
    ----------
    cmd, info_name, exc : Click handler arguments
    """
    message = (
        f"[ERROR] - CLI routine '{info_name} {cmd._original_args}' failed raising "
        f"error: '{type(exc).__name__}: {exc}'."
    )
    click.echo(message, err=True)
