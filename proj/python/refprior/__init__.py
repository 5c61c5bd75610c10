"""Python access to the refprior core: feature files, manifests, trial logs,
hard-subset curation and checkpoint scoring."""

import json

from . import _refprior as _core
from ._refprior import ContractViolation, IoError, crc32, valid_corruption_tag

__all__ = [
    "ContractViolation",
    "IoError",
    "Detector",
    "checkpoint_header",
    "cohort_report",
    "crc32",
    "decode_features",
    "encode_features",
    "read_features",
    "read_manifest",
    "read_trial_log",
    "run_cli",
    "select_hard",
    "trial_line",
    "valid_corruption_tag",
    "write_features",
    "write_manifest",
]

encode_features = _core.encode_features
decode_features = _core.decode_features


def write_features(path, features):
    _core.write_features(str(path), features)


def read_features(path):
    return _core.read_features(str(path))


def read_manifest(path, check_files=True):
    return json.loads(_core.read_manifest(str(path), check_files))


def write_manifest(path, records):
    _core.write_manifest(str(path), json.dumps(list(records)))


def trial_line(record):
    return _core.trial_line(json.dumps(record))


def read_trial_log(path):
    return json.loads(_core.read_trial_log(str(path)))


def select_hard(trials, tau_real=4, s_aggregation="median", rt_aggregation="mean", cohorts=None,
                rt_stats_include_real=False):
    cfg = {
        "tau_real": tau_real,
        "s_aggregation": s_aggregation,
        "rt_aggregation": rt_aggregation,
        "cohorts": None if cohorts is None else list(cohorts),
        "rt_stats_include_real": rt_stats_include_real,
    }
    return json.loads(_core.select_hard(json.dumps(list(trials)), json.dumps(cfg)))


def cohort_report(trials):
    return json.loads(_core.cohort_report(json.dumps(list(trials))))


def checkpoint_header(path):
    return json.loads(_core.checkpoint_header(str(path)))


class Detector:
    """A trained detector checkpoint, ready to score N x D feature maps."""

    def __init__(self, checkpoint):
        self._impl = _core.Detector(str(checkpoint))

    def score(self, features, image_id="", heatmap=False):
        return json.loads(self._impl.score(features, image_id, heatmap))

    fingerprint = property(lambda self: self._impl.fingerprint)
    prior_checksum = property(lambda self: self._impl.prior_checksum)
    K = property(lambda self: self._impl.K)
    D = property(lambda self: self._impl.D)
    top_k = property(lambda self: self._impl.top_k)


def run_cli(*args):
    """Runs one CLI subcommand in-process; returns (exit_code, stdout, stderr)."""
    return _core.run_cli([str(a) for a in args])
