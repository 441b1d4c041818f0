""" Writes a SampleRun to disk: samples archive, per-step traces CSV and
grayscale uncertainty-map PNGs.
"""
import logging
import os

import numpy as np
import torch
from PIL import Image

from earlyexit_lab.errors import CheckpointError, RecordNotFound
from training.archive import read_archive, write_archive
from .policies import ExitPolicy
from .samplers import SampleRun

logger = logging.getLogger(__name__)

TRACE_HEADER = ('sample', 'step', 't', 'exit_layer', 'u_at_exit')


def uncertainty_map_image(u_map, grid):
    """ One sample's per-token uncertainties as an L-mode image, u in [0, 1]
    mapped linearly onto [0, 255].
    """
    rows, cols = grid
    values = torch.as_tensor(u_map).detach().to(torch.float64).reshape(
        rows, cols).numpy()
    pixels = np.clip(np.rint(values * 255.0), 0, 255).astype(np.uint8)
    return Image.fromarray(pixels)


def export_uncertainty_maps(run, steps, directory, grid):
    """ One PNG per (sample, step). Raises RecordNotFound for a step whose
    maps the run did not keep.
    """
    missing = [step for step in steps if step not in run.maps]
    if missing:
        raise RecordNotFound(
            "uncertainty maps were not recorded for steps %s (recorded: %s)"
            % (missing, sorted(run.maps)))
    os.makedirs(directory, exist_ok=True)
    paths = []
    for step in steps:
        maps = run.maps[step]
        for sample in range(maps.shape[0]):
            path = os.path.join(
                directory, 'umap_step%05d_sample%05d.png' % (step, sample))
            uncertainty_map_image(maps[sample], grid).save(path)
            paths.append(path)
    logger.info("Wrote %s uncertainty maps to %s", len(paths), directory)
    return paths


def write_traces(run, run_dir, name='traces.csv'):
    return run_dir.write_csv(name, TRACE_HEADER, run.trace_rows())


def write_samples(run, path):
    """ Samples, traces and recorded maps in one archive; the raw arrays
    behind every PNG live here.
    """
    tensors = {
        'samples': run.samples,
        'layers_used': run.layers_used,
        'u_traces': run.u_traces,
        'ts': torch.tensor(run.ts, dtype=torch.int64),
    }
    for step, maps in sorted(run.maps.items()):
        tensors['umap/%d' % step] = maps
    metadata = {
        'sampler': run.sampler,
        'seed': run.seed,
        'depth': run.depth,
        'policy': {
            'threshold': run.policy.threshold,
            'aggregation': run.policy.aggregation,
            'min_layer': run.policy.min_layer,
        },
    }
    return write_archive(path, tensors, metadata)


def read_samples(path):
    metadata, tensors = read_archive(path)
    try:
        return SampleRun(
            samples=tensors['samples'],
            layers_used=tensors['layers_used'],
            u_traces=tensors['u_traces'],
            ts=tensors['ts'].tolist(),
            sampler=metadata['sampler'],
            policy=ExitPolicy(**metadata['policy']),
            seed=metadata['seed'],
            depth=metadata['depth'],
            maps=dict(
                (int(name.split('/', 1)[1]), value)
                for name, value in tensors.items()
                if name.startswith('umap/')),
        )
    except KeyError as exc:
        raise CheckpointError("%s is not a samples archive: missing %s" % (
            path, exc))
