""" Run directories and the files written into them. Every CSV has a header
row; floats are written with format_float so reruns are byte-identical.
"""
import csv
import json
import logging
import os

from django.conf import settings

from earlyexit_lab.utils import format_float

logger = logging.getLogger(__name__)

CONFIG_FILE = 'config.json'
METRICS_FILE = 'metrics.json'


def format_cell(value):
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return format_float(value)
    if hasattr(value, 'item'):
        return format_cell(value.item())
    return str(value)


def default_run_path(name):
    return os.path.join(settings.EARLYEXIT_OUTPUT_ROOT, name)


class CsvLog(object):
    """ Appends rows to a CSV, writing the header only when the file is new.
    """

    def __init__(self, path, header):
        self.path = path
        self.header = list(header)
        fresh = not os.path.exists(path) or os.path.getsize(path) == 0
        self.handle = open(path, 'a', newline='')
        self.writer = csv.writer(self.handle, lineterminator='\n')
        if fresh:
            self.writer.writerow(self.header)

    def append(self, row):
        self.writer.writerow([format_cell(value) for value in row])

    def flush(self):
        self.handle.flush()

    def close(self):
        self.handle.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()


class RunDirectory(object):

    def __init__(self, path):
        self.root = os.path.abspath(path)
        os.makedirs(self.root, exist_ok=True)

    def path(self, *parts):
        return os.path.join(self.root, *parts)

    def subdir(self, name):
        path = self.path(name)
        os.makedirs(path, exist_ok=True)
        return path

    def checkpoint_path(self, step=None):
        name = 'final.eex' if step is None else 'step_%07d.eex' % step
        return os.path.join(self.subdir('checkpoints'), name)

    def write_json(self, name, data):
        path = self.path(name)
        with open(path, 'w') as handle:
            json.dump(data, handle, indent=2, sort_keys=True)
            handle.write('\n')
        logger.info("Wrote %s", path)
        return path

    def read_json(self, name):
        with open(self.path(name)) as handle:
            return json.load(handle)

    def write_config(self, run_config):
        return self.write_json(CONFIG_FILE, run_config)

    def update_metrics(self, section, values):
        """ Merges one command's summary into metrics.json under `section`.
        """
        metrics = {}
        if os.path.exists(self.path(METRICS_FILE)):
            metrics = self.read_json(METRICS_FILE)
        metrics[section] = values
        return self.write_json(METRICS_FILE, metrics)

    def write_csv(self, name, header, rows):
        path = self.path(name)
        with open(path, 'w', newline='') as handle:
            writer = csv.writer(handle, lineterminator='\n')
            writer.writerow(header)
            for row in rows:
                writer.writerow([format_cell(value) for value in row])
        logger.info("Wrote %s", path)
        return path

    def trim_csv(self, name, keep):
        """ Rewrites a CSV in place with only the rows (as dicts) for which
        keep(row) is true. A missing file is left missing.
        """
        path = self.path(name)
        if not os.path.exists(path):
            return path
        with open(path, newline='') as handle:
            reader = csv.DictReader(handle)
            header = reader.fieldnames or []
            rows = [row for row in reader if keep(row)]
        partial = path + '.partial'
        with open(partial, 'w', newline='') as handle:
            writer = csv.writer(handle, lineterminator='\n')
            writer.writerow(header)
            for row in rows:
                writer.writerow([row[key] for key in header])
        os.replace(partial, path)
        logger.info("Kept %s rows of %s", len(rows), path)
        return path

    def csv_log(self, name, header):
        return CsvLog(self.path(name), header)
