"""Exception hierarchy and command error handling.

Every failure the engine can report deliberately is a ``SteerMusicError``.
The CLI maps those to exit status 1 (user error) and anything else to exit
status 2 (internal error), mirroring the way the web app's error handlers
split expected 4xx responses from unexpected 500s.
"""

import functools
import json
import sys
from typing import Any, Callable, Optional

import click
from flask import current_app

EXIT_OK = 0
EXIT_USER_ERROR = 1
EXIT_INTERNAL_ERROR = 2


class SteerMusicError(Exception):
    """Base class for all expected engine errors."""

    kind = 'error'

    def to_dict(self) -> dict:
        return {'error': self.kind, 'message': str(self)}


class InvalidArgumentError(SteerMusicError, ValueError):
    kind = 'invalid-argument'


class InvalidStateError(SteerMusicError):
    kind = 'invalid-state'


class MissingConditionError(SteerMusicError, KeyError):
    kind = 'missing-condition'

    def __str__(self) -> str:
        # KeyError quotes its argument; keep the plain message
        return str(self.args[0]) if self.args else ''


class UnsupportedCapabilityError(SteerMusicError):
    kind = 'unsupported-capability'


class DegenerateInputError(SteerMusicError):
    kind = 'degenerate-input'


class UndefinedCorrelationError(SteerMusicError):
    kind = 'undefined-correlation'


class UndefinedSimilarityError(SteerMusicError):
    kind = 'undefined-similarity'


class ConfigError(SteerMusicError):
    kind = 'config'


class WavFormatError(SteerMusicError):
    """Malformed WAV data; ``offset`` is the byte offset of the bad field."""

    kind = 'wav-format'

    def __init__(self, message: str, offset: int, path: Optional[str] = None):
        location = f'{path}: ' if path else ''
        super().__init__(f'{location}{message} (at byte offset {offset})')
        self.offset = offset
        self.path = path

    def to_dict(self) -> dict:
        data = super().to_dict()
        data['offset'] = self.offset
        return data


def handle_command_errors(func: Callable[..., Any]) -> Callable[..., Any]:
    """Wrap a click command so failures produce structured exit codes.

    Expected errors print a one-line JSON object on stderr and exit 1;
    unexpected exceptions are logged with traceback and exit 2. In both cases
    the artifacts the command registered are removed through the
    ArtifactWriter stored on the click context.
    """

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        ctx = click.get_current_context()
        try:
            return func(*args, **kwargs)
        except SteerMusicError as e:
            _run_cleanup(ctx)
            current_app.logger.warning(f"Command '{ctx.info_name}' failed: {e}")
            click.echo(json.dumps(e.to_dict(), sort_keys=True), err=True)
            sys.exit(EXIT_USER_ERROR)
        except (click.exceptions.Exit, click.ClickException, SystemExit):
            raise
        except Exception as e:
            _run_cleanup(ctx)
            current_app.logger.error(f"Unhandled exception in '{ctx.info_name}': {e}", exc_info=True)
            click.echo(json.dumps({'error': 'internal', 'message': str(e)}, sort_keys=True), err=True)
            sys.exit(EXIT_INTERNAL_ERROR)

    return wrapper


def _run_cleanup(ctx: click.Context) -> None:
    writer = (ctx.meta or {}).get('steermusic.artifacts')
    if writer is None:
        return
    try:
        writer.discard()
    except Exception as e:
        current_app.logger.error(f'Failed to remove partial outputs: {e}')
