"""Seeded Gaussian-cluster benchmarks with a rotation shift and far/near OOD inputs.

Class c has mean class_sep * e_c in a random orthonormal frame. The shifted
split rotates every class mean by shift_angle in the (e_0, e_1) plane. Far OOD
inputs sit at -ood_scale * class_sep along the normalised sum of the class
directions; near OOD inputs sit at midpoints of random class-mean pairs.
"""
import csv
import json
import logging
import math
from typing import Literal, NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from AdapterModel import LabeledBatch

SPLITS = ("train", "test_id", "test_shift", "test_ood")
# Label written for unlabeled OOD rows in the cache format.
NO_LABEL = -1


class DataSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_train: int = Field(2000, gt=0)
    n_test: int = Field(600, gt=0)
    d_in: int = Field(32, gt=0)
    n_classes: int = Field(3, ge=2)
    class_sep: float = Field(2.0, gt=0.0)
    noise: float = Field(1.0, gt=0.0)
    shift_angle: float = Field(0.6, ge=0.0, le=math.pi)
    ood_mode: Literal["far", "near"] = "far"
    ood_scale: float = Field(3.0, gt=0.0)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_dims(self):
        if self.d_in < max(2, self.n_classes):
            raise ValueError(f"d_in={self.d_in} must be at least max(2, n_classes={self.n_classes})")
        return self


class SyntheticSplits(NamedTuple):
    train: LabeledBatch
    test_id: LabeledBatch
    test_shift: LabeledBatch
    test_ood: np.ndarray


def class_frame(spec, rng):
    Q, R = np.linalg.qr(rng.standard_normal((spec.d_in, spec.d_in)))
    return Q * np.where(np.diag(R) < 0, -1.0, 1.0)


def plane_rotation(a, b, angle):
    """Rotation by `angle` in the plane of orthonormal a, b (a turns toward b)."""
    c, s = math.cos(angle), math.sin(angle)
    return (np.eye(a.size) + (c - 1.0) * (np.outer(a, a) + np.outer(b, b))
            + s * (np.outer(b, a) - np.outer(a, b)))


def balanced_labels(n, n_classes, rng):
    return rng.permutation(np.arange(n) % n_classes)


def _clusters(means, n, noise, rng):
    labels = balanced_labels(n, means.shape[0], rng)
    inputs = means[labels] + noise * rng.standard_normal((n, means.shape[1]))
    return LabeledBatch(inputs, labels, means.shape[0])


def _ood_inputs(spec, frame, means, rng):
    n, d = spec.n_test, spec.d_in
    if spec.ood_mode == "far":
        direction = frame[:, :spec.n_classes].sum(axis=1)
        direction /= np.linalg.norm(direction)
        centers = np.tile(-spec.ood_scale * spec.class_sep * direction, (n, 1))
    else:
        first = rng.integers(0, spec.n_classes, n)
        second = (first + rng.integers(1, spec.n_classes, n)) % spec.n_classes
        centers = 0.5 * (means[first] + means[second])
    return centers + spec.noise * rng.standard_normal((n, d))


def generate(spec):
    """Train, in-distribution test, shifted test and OOD inputs, each from its own seeded stream."""
    frame_rng, train_rng, id_rng, shift_rng, ood_rng = [
        np.random.default_rng(s) for s in np.random.SeedSequence(spec.seed).spawn(5)]
    frame = class_frame(spec, frame_rng)
    means = spec.class_sep * frame[:, :spec.n_classes].T
    rotation = plane_rotation(frame[:, 0], frame[:, 1], spec.shift_angle)
    splits = SyntheticSplits(
        train=_clusters(means, spec.n_train, spec.noise, train_rng),
        test_id=_clusters(means, spec.n_test, spec.noise, id_rng),
        test_shift=_clusters(means @ rotation.T, spec.n_test, spec.noise, shift_rng),
        test_ood=_ood_inputs(spec, frame, means, ood_rng),
    )
    logging.info(f"[data-seed{spec.seed}] {spec.n_train} train / {spec.n_test} test points, d={spec.d_in}, "
                 f"C={spec.n_classes}, shift {spec.shift_angle:.3f} rad, {spec.ood_mode} OOD")
    return splits


def save_dataset(path, spec, splits):
    """Columnar text cache: a '# {spec json}' line, a header, then one row per example."""
    columns = ["split", "label"] + [f"x{i}" for i in range(spec.d_in)]
    with open(path, "w", newline="") as f:
        f.write(f"# {spec.model_dump_json()}\n")
        writer = csv.writer(f)
        writer.writerow(columns)
        for name in SPLITS:
            part = getattr(splits, name)
            inputs, labels = (part, np.full(len(part), NO_LABEL)) if name == "test_ood" else (part.inputs, part.labels)
            for label, row in zip(labels, inputs):
                writer.writerow([name, int(label)] + [repr(float(v)) for v in row])


def load_dataset(path):
    with open(path, newline="") as f:
        header = f.readline()
        if not header.startswith("# "):
            raise ValueError(f"{path} is missing the spec header line")
        spec = DataSpec.model_validate(json.loads(header[2:]))
        reader = csv.reader(f)
        next(reader)
        rows = {name: ([], []) for name in SPLITS}
        for row in reader:
            labels, inputs = rows[row[0]]
            labels.append(int(row[1]))
            inputs.append([float(v) for v in row[2:]])
    parts = {}
    for name in SPLITS:
        labels, inputs = rows[name]
        inputs = np.array(inputs, dtype=np.float64).reshape(len(labels), spec.d_in)
        parts[name] = inputs if name == "test_ood" else LabeledBatch(inputs, labels, spec.n_classes)
    return spec, SyntheticSplits(**parts)


def cache_matches(path):
    """True when regenerating from the cached spec reproduces every array bit for bit."""
    spec, cached = load_dataset(path)
    fresh = generate(spec)
    for name in SPLITS:
        a, b = getattr(cached, name), getattr(fresh, name)
        if name == "test_ood":
            if not np.array_equal(a, b):
                return False
        elif not (np.array_equal(a.inputs, b.inputs) and np.array_equal(a.labels, b.labels)):
            return False
    return True
