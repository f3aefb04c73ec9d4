import json
import logging
import os
import traceback
from datetime import datetime, timezone
from typing import Any, Dict, Optional

from dotenv import load_dotenv

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
ROOT_LOGGER_NAME = 'petalface'

load_dotenv()


def _resolve_level(level: Optional[str]) -> int:
    name = (level or os.environ.get('PETAL_LOG_LEVEL') or 'INFO').upper()
    return getattr(logging, name, logging.INFO)


class RunLogger:
    def __init__(self, component: str = 'run', project_id: Optional[str] = None,
                 level: Optional[str] = None, context: Optional[Dict[str, Any]] = None):
        """
        Initialize a structured run logger.

        Entries are JSON objects emitted through the stdlib logger
        ``petalface.<component>`` on stderr. When a Google Cloud project id is
        given (argument or ``GOOGLE_CLOUD_PROJECT``), entries are mirrored to
        Cloud Logging as structured payloads.

        Args:
            component: Logger suffix, usually the module or command name
            project_id: Optional Google Cloud project ID for Cloud Logging
            level: Optional level name; defaults to ``PETAL_LOG_LEVEL`` or INFO
            context: Fields attached to every entry
        """
        self.component = component
        self.project_id = project_id or os.environ.get('GOOGLE_CLOUD_PROJECT')
        self.context = dict(context or {})
        self.cloud_logger = None

        self.local_logger = logging.getLogger(f'{ROOT_LOGGER_NAME}.{component}')
        self.local_logger.setLevel(_resolve_level(level))
        root = logging.getLogger(ROOT_LOGGER_NAME)
        if not root.handlers:
            ch = logging.StreamHandler()
            ch.setFormatter(logging.Formatter(LOG_FORMAT))
            root.addHandler(ch)

        if self.project_id:
            try:
                from google.cloud import logging as cloud_logging
                client = cloud_logging.Client(project=self.project_id)
                self.cloud_logger = client.logger(f'{ROOT_LOGGER_NAME}-{component}')
            except Exception as e:
                self.local_logger.error(f"Failed to initialize Cloud Logging: {str(e)}")

    def bind(self, **context) -> 'RunLogger':
        """Return a logger sharing sinks with this one and extra fixed context."""
        child = RunLogger.__new__(RunLogger)
        child.component = self.component
        child.project_id = self.project_id
        child.context = {**self.context, **context}
        child.cloud_logger = self.cloud_logger
        child.local_logger = self.local_logger
        return child

    def log(self, level: str, message: str, **kwargs):
        """
        Log a message with structured fields.

        Args:
            level: Level name (DEBUG, INFO, WARNING, ERROR, CRITICAL)
            message: Log message
            kwargs: Additional structured data to include in the entry
        """
        levelno = getattr(logging, level, logging.INFO)
        if not self.local_logger.isEnabledFor(levelno):
            return
        entry = {
            'timestamp': datetime.now(timezone.utc).isoformat(),
            'message': message,
            **self.context,
            **kwargs,
        }
        try:
            payload = json.dumps(entry, default=str)
        except (TypeError, ValueError) as e:
            self.local_logger.error(f"Error serializing log entry: {str(e)}")
            payload = json.dumps({'message': message})
        self.local_logger.log(levelno, payload)
        if self.cloud_logger is not None:
            try:
                self.cloud_logger.log_struct(json.loads(payload), severity=level)
            except Exception as e:
                self.local_logger.error(f"Error sending entry to Cloud Logging: {str(e)}")

    def error(self, message: str, exception: Optional[BaseException] = None, **kwargs):
        """
        Log an error with optional exception details.

        Args:
            message: Error message
            exception: Exception object whose type, message and trace are attached
            kwargs: Additional structured data
        """
        if exception is not None:
            kwargs['exception_type'] = type(exception).__name__
            kwargs['exception_message'] = str(exception)
            kwargs['stack_trace'] = ''.join(
                traceback.format_exception(type(exception), exception, exception.__traceback__)
            )
        self.log('ERROR', message, **kwargs)

    def debug(self, message: str, **kwargs):
        self.log('DEBUG', message, **kwargs)

    def info(self, message: str, **kwargs):
        self.log('INFO', message, **kwargs)

    def warning(self, message: str, **kwargs):
        self.log('WARNING', message, **kwargs)

    def critical(self, message: str, **kwargs):
        """Log a critical error."""
        self.log('CRITICAL', message, **kwargs)


def get_logger(component: str, **context) -> RunLogger:
    """Convenience constructor used at module level."""
    return RunLogger(component=component, context=context)
