# Load the Celery app whenever Django starts so tasks register with it.
from .celery import app as celery_app  # noqa

__all__ = ('celery_app',)
