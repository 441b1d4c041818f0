import math
import re

import numpy as np
import torch
from django.conf import settings


def configure_torch():
    """ Pins intra-op parallelism so reruns produce identical bits.
    """
    torch.set_num_threads(settings.EARLYEXIT_TORCH_THREADS)


def make_generator(seed):
    generator = torch.Generator()
    generator.manual_seed(int(seed))
    return generator


def chain_seed(seed, index):
    """ Derives the private seed of one sampling chain from the run seed and
    the chain's index, independent of how chains are batched.
    """
    state = np.random.SeedSequence([int(seed), int(index)]).generate_state(2)
    return int(state[0]) << 32 | int(state[1])


def format_float(value):
    """ Shortest round-tripping text for a float; CSV artifacts rely on this
    being stable across runs.
    """
    value = float(value)
    if math.isnan(value):
        return 'nan'
    return repr(value)


def parse_float_list(text):
    """ Turns "0.2,0.1, 0.05" into [0.2, 0.1, 0.05].
    """
    return [float(part) for part in text.split(',') if part.strip()]


def normalise_string(string):
    """ Strips surrounding whitespace from string, lowercases it and replaces
        runs of non-word characters with dashes
    """
    string = (string.strip()).lower()
    return re.sub(r'[\W_]+', '-', string)
