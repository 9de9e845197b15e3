"""SteerMusic Flask Application Factory.

The Flask app hosts configuration, logging and the experiment CLI; the
numerical engine lives in the plain modules of this package and does not
need an application context.
"""

import logging
from typing import Any, Dict, Optional

from dotenv import load_dotenv
from flask import Flask

# Load environment variables
load_dotenv()


def create_app(config_overrides: Optional[Dict[str, Any]] = None) -> Flask:
    """Create and configure Flask application."""
    app = Flask(__name__)

    # Load configuration
    from steermusic.config import Config
    app.config.update(Config.load_config())
    if config_overrides:
        app.config.update(config_overrides)

    # Logging configuration
    log_level_name = app.config['LOG_LEVEL']
    log_level = getattr(logging, log_level_name, logging.INFO)

    # Only configure logging if not already configured (e.g., by pytest)
    if not logging.root.handlers:
        logging.basicConfig(
            level=log_level,
            format='%(asctime)s %(levelname)s %(name)s %(message)s'
        )
    else:
        logging.root.setLevel(log_level)

    app.logger.setLevel(log_level)
    app.logger.debug(f'Application starting with log level: {log_level_name}')

    # Register CLI commands
    from steermusic.cli import register_cli_commands
    register_cli_commands(app)

    return app
