"""
logger.py

This module provides a simple logging setup function for the separation pipeline.
It configures a named logger to write INFO and higher level logs to a file,
including timestamps and log levels in each log entry.

Library modules log through children of the "drnmf" logger, so configuring
"drnmf" once (the CLI does it per output directory) captures every message.

Usage:
    logger = setup_logger('pipeline.log', 'drnmf')
    logger.info("This is an info message")
"""

import logging


def setup_logger(filename='pipeline.log', logger_name='drnmf', level=logging.INFO):
    """
    Configure and return a logger instance for the application.

    The logger writes messages at `level` and above to `filename`,
    including timestamp, log level, and message in each log entry.

    Args:
        filename (str): The file where logs will be saved.
        logger_name (str): The name of the logger to create/use.
        level (int): Minimum level written to the file.

    Returns:
        logging.Logger: Configured logger instance.
    """
    # Retrieve or create a logger with the given name
    logger = logging.getLogger(logger_name)

    # Only configure the logger once to avoid duplicate handlers
    if not logger.handlers:
        handler = logging.FileHandler(filename)

        # Define log format: timestamp - log level - message
        formatter = logging.Formatter('%(asctime)s - %(levelname)s - %(message)s')
        handler.setFormatter(formatter)

        logger.addHandler(handler)
        logger.setLevel(level)

        # Prevent propagation to root logger to avoid duplicate logs
        logger.propagate = False

    return logger


def close_logger(logger_name='drnmf'):
    """
    Detach and close every handler of a logger so that a later
    setup_logger call can point it at a different file.
    """
    logger = logging.getLogger(logger_name)
    for handler in list(logger.handlers):
        handler.close()
        logger.removeHandler(handler)
