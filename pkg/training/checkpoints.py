import logging
from collections import OrderedDict
from dataclasses import dataclass, field

import torch

from backbone.models import BackboneConfig
from earlyexit_lab.errors import CheckpointError
from uem.models import EarlyExitDenoiser
from .archive import read_archive, write_archive

logger = logging.getLogger(__name__)

# Run-config sections a checkpoint cannot be reused across.
ARCHITECTURE_SECTIONS = ('schedule', 'data', 'model', 'uem')


@dataclass
class Checkpoint:
    model: EarlyExitDenoiser
    run_config: dict
    step: int
    optimizer_state: dict = None
    generator_state: torch.Tensor = None
    tensors: dict = field(default_factory=dict)


def flatten(config, prefix=''):
    """ {'a': {'b': 1}} -> {'a.b': 1}
    """
    flat = {}
    for key, value in config.items():
        name = prefix + key
        if isinstance(value, dict):
            flat.update(flatten(value, name + '.'))
        else:
            flat[name] = value
    return flat


def config_differences(first, second, sections=ARCHITECTURE_SECTIONS):
    """ Sorted dotted keys whose values differ between two run configs,
    limited to the given top-level sections.
    """
    first = dict((k, v) for k, v in first.items() if k in sections)
    second = dict((k, v) for k, v in second.items() if k in sections)
    flat_first, flat_second = flatten(first), flatten(second)
    keys = set(flat_first) | set(flat_second)
    return sorted(
        key for key in keys if flat_first.get(key) != flat_second.get(key))


def _optimizer_tensors(optimizer):
    state = optimizer.state_dict()
    tensors = OrderedDict()
    for index in sorted(state['state']):
        for key, value in sorted(state['state'][index].items()):
            tensors['optim/%s/%s' % (index, key)] = torch.as_tensor(value)
    groups = []
    for group in state['param_groups']:
        group = dict(group)
        if isinstance(group.get('betas'), tuple):
            group['betas'] = list(group['betas'])
        groups.append(group)
    return tensors, groups


def _optimizer_state(tensors, groups):
    state = {}
    for name, value in tensors.items():
        if not name.startswith('optim/'):
            continue
        _, index, key = name.split('/', 2)
        state.setdefault(int(index), {})[key] = value
    param_groups = []
    for group in groups:
        group = dict(group)
        if 'betas' in group:
            group['betas'] = tuple(group['betas'])
        param_groups.append(group)
    return {'state': state, 'param_groups': param_groups}


def save_checkpoint(path, model, run_config, step, optimizer=None,
                    generator=None, histogram=None):
    tensors = OrderedDict(
        ('model/%s' % name, value)
        for name, value in model.state_dict().items())
    metadata = {
        'config': run_config,
        'backbone': model.config.to_dict(),
        'uem': {
            'share_params': model.uem.share_params,
            'aggregation': model.aggregation,
        },
        'step': int(step),
    }
    if optimizer is not None:
        optimizer_tensors, groups = _optimizer_tensors(optimizer)
        tensors.update(optimizer_tensors)
        metadata['param_groups'] = groups
    if generator is not None:
        tensors['rng/trainer'] = generator.get_state()
    if histogram is not None:
        tensors.update(histogram.state())
    write_archive(path, tensors, metadata)
    logger.info("Saved checkpoint at step %s to %s", step, path)
    return path


def load_checkpoint(path, expected_config=None):
    """ Rebuilds the model (and, when present, optimizer and random state)
    from an archive. With expected_config set, architecture keys that differ
    raise CheckpointError listing them.
    """
    metadata, tensors = read_archive(path)
    try:
        run_config = metadata['config']
        backbone = BackboneConfig.from_dict(metadata['backbone'])
        uem = metadata['uem']
        step = int(metadata['step'])
    except (KeyError, TypeError) as exc:
        raise CheckpointError("%s is missing checkpoint metadata: %s" % (
            path, exc))

    if expected_config is not None:
        differing = config_differences(run_config, expected_config)
        if differing:
            raise CheckpointError(
                "checkpoint %s does not match the run config: %s" % (
                    path, ", ".join(differing)),
                differing_keys=differing)

    model = EarlyExitDenoiser(
        backbone, share_params=uem['share_params'],
        aggregation=uem['aggregation'])
    weights = OrderedDict(
        (name[len('model/'):], value) for name, value in tensors.items()
        if name.startswith('model/'))
    try:
        model.load_state_dict(weights, strict=True)
    except RuntimeError as exc:
        raise CheckpointError("%s does not fit its own config: %s" % (
            path, exc))

    optimizer_state = None
    if 'param_groups' in metadata:
        optimizer_state = _optimizer_state(tensors, metadata['param_groups'])
    logger.info("Loaded checkpoint %s (step %s)", path, step)
    return Checkpoint(
        model=model,
        run_config=run_config,
        step=step,
        optimizer_state=optimizer_state,
        generator_state=tensors.get('rng/trainer'),
        tensors=tensors,
    )


def checkpoint_run_config(path):
    """ The run config a checkpoint was trained under, without building the
    model.
    """
    metadata, _ = read_archive(path)
    if 'config' not in metadata:
        raise CheckpointError("%s has no run config" % path)
    return metadata['config']
