"""
Django settings for the earlyexit_lab project.

Everything that varies between a laptop and a worker box is read from the
environment; run-level experiment settings live in the JSON run config
validated by runs.serializers, not here.

For the full list of Django settings and their values, see
https://docs.djangoproject.com/en/4.2/ref/settings/
"""
import os


# Build paths inside the project like this: os.path.join(BASE_DIR, ...)
BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

# Nothing is served, but Django refuses to start without one.
SECRET_KEY = os.environ.get('SECRET_KEY', 'REPLACEME')

DEBUG = os.environ.get('DEBUG', False)


# Application definition

INSTALLED_APPS = (
    # 3rd party
    'rest_framework',
    # us
    'schedule',
    'backbone',
    'uem',
    'training',
    'sampling',
    'evaluation',
    'runs',
)

# No models are persisted; runs live on disk.
DATABASES = {}

TIME_ZONE = 'UTC'

USE_TZ = True


# Output locations

EARLYEXIT_OUTPUT_ROOT = os.environ.get(
    'EARLYEXIT_OUTPUT_ROOT', os.path.join(BASE_DIR, 'runs_out'))

EARLYEXIT_DEFAULT_CONFIG = os.environ.get(
    'EARLYEXIT_DEFAULT_CONFIG', os.path.join(BASE_DIR, 'configs', 'gmm.json'))

# Intra-op threads are pinned so CSV artifacts are byte-identical between
# reruns on the same machine.
EARLYEXIT_TORCH_THREADS = int(os.environ.get('EARLYEXIT_TORCH_THREADS', '1'))


# Sentry configuration
RAVEN_CONFIG = {
    # DevOps will supply you with this.
    'dsn': os.environ.get('EARLYEXIT_SENTRY_DSN', None),
}

LOG_LEVEL = os.environ.get('EARLYEXIT_LOG_LEVEL', 'INFO')

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'timestamped': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'timestamped',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': LOG_LEVEL,
    },
}

if RAVEN_CONFIG['dsn']:
    LOGGING['handlers']['sentry'] = {
        'level': 'ERROR',
        'class': 'raven.handlers.logging.SentryHandler',
        'dsn': RAVEN_CONFIG['dsn'],
    }
    LOGGING['root']['handlers'].append('sentry')


# Celery configuration options
# Desk-scale default: no broker, tasks run in the calling process. Point
# EARLYEXIT_BROKER_URL at redis and switch eager off to fan sweeps out.
CELERY_BROKER_URL = os.environ.get('EARLYEXIT_BROKER_URL', 'memory://')
CELERY_RESULT_BACKEND = os.environ.get(
    'EARLYEXIT_RESULT_BACKEND', 'cache+memory://')

CELERY_TASK_ALWAYS_EAGER = os.environ.get(
    'EARLYEXIT_CELERY_EAGER', '1') not in ('0', 'false', 'False')
CELERY_TASK_EAGER_PROPAGATES = True

CELERY_TASK_DEFAULT_QUEUE = 'earlyexit_lab'

CELERY_TASK_ROUTES = {
    'training.tasks.train_model': {
        'queue': 'training',
    },
    'evaluation.tasks.sweep_point': {
        'queue': 'evaluation',
    },
}

CELERY_TASK_SERIALIZER = 'json'
CELERY_RESULT_SERIALIZER = 'json'
CELERY_ACCEPT_CONTENT = ['json']
