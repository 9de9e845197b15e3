#!/usr/bin/env python3
"""FLASK_APP entry point for the experiment commands.

    flask --app flask_cli gen --n-clips 200 --out runs/demo
    python flask_cli.py edit --method dds --out runs/demo
"""

from steermusic import create_app

app = create_app()

if __name__ == '__main__':
    with app.app_context():
        app.cli(prog_name='steermusic')
