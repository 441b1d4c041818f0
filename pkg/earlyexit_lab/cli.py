import os
import sys


def main(argv=None):
    """ `earlyexit-lab train|sample|eval|profile|sweep ...`, the installed
    counterpart of manage.py.
    """
    os.environ.setdefault("DJANGO_SETTINGS_MODULE", "earlyexit_lab.settings")

    from django.core.management import execute_from_command_line

    argv = list(sys.argv if argv is None else argv)
    argv[0] = 'earlyexit-lab'
    execute_from_command_line(argv)
