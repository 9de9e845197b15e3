"""Run the experiment CLI with ``python -m steermusic``."""

from flask.cli import FlaskGroup

from steermusic import create_app

cli = FlaskGroup(create_app=create_app, add_default_commands=False)

if __name__ == '__main__':
    cli()
