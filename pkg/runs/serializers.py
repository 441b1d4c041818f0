""" RunConfig schema. One serializer per section; every field carries its
default, unknown keys are refused at every level and the validated document
is plain JSON that can be echoed into the run directory.
"""
import copy
import json
import os

from rest_framework import serializers

from earlyexit_lab.errors import ConfigError

DATASET_CHOICES = (
    'gmm', 'swissroll', 'checkerboard', 'tinyimage',
    'gaussian-mixture', 'swiss-roll', 'tiny-image',
)
IMAGE_KINDS = ('tinyimage', 'tiny-image')
DEFAULT_THRESHOLDS = (0.2, 0.1, 0.05, 0.02, 0.01)
DEFAULT_BANDWIDTHS = (0.1, 0.2, 0.5, 1.0, 2.0)


class StrictSerializer(serializers.Serializer):
    """ Refuses keys the schema does not know about.
    """

    def to_internal_value(self, data):
        if isinstance(data, dict):
            unknown = sorted(set(data) - set(self.fields))
            if unknown:
                raise serializers.ValidationError(
                    dict((key, ['Unknown key.']) for key in unknown))
        return super(StrictSerializer, self).to_internal_value(data)


class ScheduleSerializer(StrictSerializer):
    T = serializers.IntegerField(min_value=1, default=1000)
    beta_start = serializers.FloatField(min_value=0.0, default=1e-4)
    beta_end = serializers.FloatField(min_value=0.0, default=0.02)

    def validate(self, attrs):
        if attrs['beta_end'] >= 1.0:
            raise serializers.ValidationError(
                {'beta_end': ['Must be below 1.']})
        if attrs['beta_start'] > attrs['beta_end']:
            raise serializers.ValidationError(
                {'beta_start': ['Must not exceed beta_end.']})
        return attrs


class DataSerializer(StrictSerializer):
    kind = serializers.ChoiceField(choices=DATASET_CHOICES, default='gmm')
    n = serializers.IntegerField(min_value=1, default=10000)
    seed = serializers.IntegerField(default=0)
    image_size = serializers.IntegerField(min_value=2, default=8)


class ModelConfigSerializer(StrictSerializer):
    depth = serializers.IntegerField(min_value=2, default=13)
    hidden_dim = serializers.IntegerField(min_value=2, default=64)
    num_heads = serializers.IntegerField(min_value=1, default=4)
    patch_size = serializers.IntegerField(min_value=1, default=1)
    share_final_head = serializers.BooleanField(default=True)
    mlp_ratio = serializers.IntegerField(min_value=1, default=4)

    def validate(self, attrs):
        if attrs['hidden_dim'] % attrs['num_heads']:
            raise serializers.ValidationError(
                {'hidden_dim': ['Must be divisible by num_heads.']})
        if attrs['hidden_dim'] % 2:
            raise serializers.ValidationError(
                {'hidden_dim': ['Must be even.']})
        return attrs


class UemSerializer(StrictSerializer):
    share_params = serializers.BooleanField(default=False)
    aggregation = serializers.ChoiceField(
        choices=('mean', 'max'), default='mean')


class LossSerializer(StrictSerializer):
    lambda_u = serializers.FloatField(min_value=0.0, default=1.0)
    beta_ual = serializers.FloatField(min_value=0.0, default=1.0)
    layerwise = serializers.ChoiceField(
        choices=('ual', 'plain', 'none'), default='ual')


class TrainSerializer(StrictSerializer):
    learning_rate = serializers.FloatField(default=2e-4)
    adam_beta1 = serializers.FloatField(min_value=0.0, default=0.99)
    adam_beta2 = serializers.FloatField(min_value=0.0, default=0.99)
    weight_decay = serializers.FloatField(min_value=0.0, default=0.03)
    batch_size = serializers.IntegerField(min_value=1, default=256)
    total_steps = serializers.IntegerField(min_value=1, default=20000)
    checkpoint_every = serializers.IntegerField(min_value=0, default=5000)
    log_every = serializers.IntegerField(min_value=0, default=500)

    def validate_learning_rate(self, value):
        if not value > 0:
            raise serializers.ValidationError('Must be greater than 0.')
        return value

    def validate(self, attrs):
        for key in ('adam_beta1', 'adam_beta2'):
            if attrs[key] >= 1.0:
                raise serializers.ValidationError({key: ['Must be below 1.']})
        return attrs


class ExitSerializer(StrictSerializer):
    threshold = serializers.FloatField(min_value=0.0, default=0.1)
    min_layer = serializers.IntegerField(min_value=1, default=1)


class SampleSerializer(StrictSerializer):
    sampler = serializers.ChoiceField(
        choices=('ancestral', 'deterministic'), default='ancestral')
    n = serializers.IntegerField(min_value=1, default=512)
    steps = serializers.IntegerField(min_value=1, default=50)
    map_steps = serializers.ListField(
        child=serializers.IntegerField(min_value=0), default=list)


class EvalSerializer(StrictSerializer):
    thresholds = serializers.ListField(
        child=serializers.FloatField(min_value=0.0), min_length=1,
        default=lambda: list(DEFAULT_THRESHOLDS))
    n_reference = serializers.IntegerField(min_value=4, default=2000)
    reference_seed = serializers.IntegerField(default=1)
    bandwidths = serializers.ListField(
        child=serializers.FloatField(min_value=1e-12), min_length=1,
        default=lambda: list(DEFAULT_BANDWIDTHS))
    t_grid = serializers.ListField(
        child=serializers.IntegerField(min_value=1), default=list)
    probe_n = serializers.IntegerField(min_value=1, default=256)
    probe_seed = serializers.IntegerField(default=0)


class PathsSerializer(StrictSerializer):
    out = serializers.CharField(allow_null=True, default=None)
    checkpoint = serializers.CharField(allow_null=True, default=None)


class RunConfigSerializer(StrictSerializer):
    seed = serializers.IntegerField(default=0)
    schedule = ScheduleSerializer(required=False)
    data = DataSerializer(required=False)
    model = ModelConfigSerializer(required=False)
    uem = UemSerializer(required=False)
    loss = LossSerializer(required=False)
    train = TrainSerializer(required=False)
    exit = ExitSerializer(required=False)
    sample = SampleSerializer(required=False)
    eval = EvalSerializer(required=False)
    paths = PathsSerializer(required=False)

    def to_internal_value(self, data):
        if isinstance(data, dict):
            data = dict(data)
            # Absent sections take every default.
            for name, field in self.fields.items():
                if isinstance(field, serializers.Serializer):
                    data.setdefault(name, {})
        return super(RunConfigSerializer, self).to_internal_value(data)

    def validate(self, attrs):
        errors = {}
        T = attrs['schedule']['T']
        model = attrs['model']
        if attrs['exit']['min_layer'] > model['depth']:
            errors['exit.min_layer'] = ['Must not exceed model.depth.']
        if attrs['data']['kind'] in IMAGE_KINDS and \
                attrs['data']['image_size'] % model['patch_size']:
            errors['model.patch_size'] = [
                'Must divide data.image_size.']
        if attrs['sample']['sampler'] == 'deterministic' and \
                attrs['sample']['steps'] > T:
            errors['sample.steps'] = ['Must not exceed schedule.T.']
        if any(t > T for t in attrs['eval']['t_grid']):
            errors['eval.t_grid'] = ['Timesteps must not exceed schedule.T.']
        if errors:
            raise serializers.ValidationError(errors)
        return attrs


def flatten_errors(errors, prefix=''):
    """ Nested serializer errors -> {'section.key': [messages]}.
    """
    flat = {}
    if isinstance(errors, dict):
        for key, value in errors.items():
            name = str(key) if key != 'non_field_errors' else ''
            name = prefix + name if name else prefix.rstrip('.')
            if isinstance(value, dict):
                flat.update(flatten_errors(value, name + '.'))
            else:
                flat[name or 'config'] = [str(item) for item in value]
    else:
        flat[prefix.rstrip('.') or 'config'] = [str(item) for item in errors]
    return flat


def parse_override(text):
    """ 'exit.threshold=0.1' -> ('exit.threshold', 0.1). Values are read as
    JSON when they parse, otherwise kept as strings.
    """
    if '=' not in text:
        raise ConfigError(
            "override %r is not of the form section.key=value" % (text,))
    key, raw = text.split('=', 1)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return key.strip(), value


def apply_override(document, key, value):
    parts = key.split('.')
    target = document
    for part in parts[:-1]:
        target = target.setdefault(part, {})
        if not isinstance(target, dict):
            raise ConfigError("cannot override %r: %r is not a section" % (
                key, part))
    target[parts[-1]] = value


def resolve_run_config(document=None, overrides=()):
    """ Validates a run config after applying overrides, given as
    'key=value' strings or (key, value) pairs. Returns plain dicts.
    """
    document = copy.deepcopy(document) if document is not None else {}
    if not isinstance(document, dict):
        raise ConfigError("run config must be a JSON object")
    for override in overrides:
        if isinstance(override, str):
            override = parse_override(override)
        apply_override(document, *override)
    serializer = RunConfigSerializer(data=document)
    if not serializer.is_valid():
        details = flatten_errors(serializer.errors)
        raise ConfigError(
            "invalid run config: %s" % ", ".join(sorted(details)),
            details=details)
    return json.loads(json.dumps(serializer.validated_data))


def load_run_config(path, overrides=()):
    if not os.path.exists(path):
        raise ConfigError("config file not found: %s" % path)
    with open(path) as handle:
        try:
            document = json.load(handle)
        except ValueError as exc:
            raise ConfigError("config file %s is not valid JSON: %s" % (
                path, exc))
    return resolve_run_config(document, overrides)
