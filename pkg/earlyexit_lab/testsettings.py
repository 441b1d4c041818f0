import tempfile

from earlyexit_lab.settings import *  # flake8: noqa

SECRET_KEY = 'TESTSEKRET'

DEBUG = True

CELERY_TASK_EAGER_PROPAGATES = True
CELERY_TASK_ALWAYS_EAGER = True
CELERY_BROKER_URL = 'memory://'
CELERY_RESULT_BACKEND = 'cache+memory://'

EARLYEXIT_OUTPUT_ROOT = tempfile.mkdtemp(prefix='earlyexit-test-')

LOGGING['root']['level'] = 'WARNING'
