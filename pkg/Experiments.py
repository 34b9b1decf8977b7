"""Experiment subcommands: train, eval, ablate, klgap, verify-geometry, validate-normalizer, distill.

Every grid of (point, seed) units runs through run_grid, which dispatches to a
process pool and funnels results into a single ExperimentLogger. Each unit
derives all of its random streams from its own seed.
"""
import csv
import logging
import math
import os
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field

import numpy as np

from AdapterModel import (
    init_adapters,
    init_base_model,
    load_checkpoint,
    make_posterior_spec,
    save_checkpoint,
)
from errors import EXIT_OK, EXIT_VERIFICATION, ConfigError, VerificationError
from experiment_config import ABLATION_AXES, config_hash, override
from experiment_logger import ExperimentLogger, to_jsonable
from GeometryLab import kl_gap_grid, verify_geometry
from LaplaceInference import (
    PosteriorSampleSet,
    ambient_laplace,
    deep_ensemble,
    distill,
    distillation_kl,
    gauss_proj_sample,
    hessian_subset,
    laplace_sample,
    member_seeds,
    per_sample_probs,
    predictive,
    riemannian_map,
    tangent_hessian,
)
from MatrixLangevin import log_normalizer_report
from ParseResults import flatten, results_to_csv
from ReliabilityMetrics import ood_auroc, reliability_bins_csv, split_metrics, uncertainty_scores
from StandardError import mean_std_cv, samples_for_precision
from StiefelManifold import haar_sample
from SyntheticData import DataSpec, generate, load_dataset, save_dataset

EVAL_SPLITS = ("test_id", "test_shift")
# Parameter sets a method's predictive averages over.
EVAL_ROLES = {
    "map_only": "map",
    "sba": "sample",
    "gauss_proj": "sample",
    "deep_ensemble": "member",
    "sba_distilled": "student",
}
AXIS_FIELDS = {
    "kappa0": "prior.kappa0",
    "samples": "samples",
    "rank": "model.rank",
    "components": "components",
    "hessian_points": "train.hessian_points",
    "hessian_mode": "train.hessian_mode",
}
TRACE_COLUMNS = ["set", "step", "log_posterior", "grad_norm"]


@dataclass
class FitResult:
    base: object
    spec: object
    parameter_sets: list = field(default_factory=list)
    roles: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    info: dict = field(default_factory=dict)

    def add(self, role, params):
        self.parameter_sets.append(list(params))
        self.roles.append(role)

    def sample_set(self, role):
        sets = [p for p, r in zip(self.parameter_sets, self.roles) if r == role]
        if not sets:
            raise ConfigError(f"no '{role}' parameter sets in this run", field_path="method")
        return PosteriorSampleSet(tuple(sets))


def seed_streams(seed):
    """Independent base-model, adapter-init and posterior-sampling streams for one seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]


def data_for_seed(config, seed):
    return config.data.model_copy(update={"seed": seed})


def checkpoint_path(out_dir, method, seed):
    return os.path.join(out_dir, f"checkpoint-{method}-seed{seed}.npz")


def fit(config, seed, splits, tag=None):
    """Train the configured method on splits.train and collect every parameter set it produces."""
    tag = tag or f"{config.method}-seed{seed}"
    base_rng, init_rng, sample_rng = seed_streams(seed)
    base = init_base_model(config.data.d_in, config.model.hidden, config.data.n_classes, base_rng,
                           config.model.activation)
    train_config = config.train.model_copy(update={"seed": seed})

    if config.method == "deep_ensemble":
        members = deep_ensemble(base, config.prior, splits.train, train_config, config.ensemble_size,
                                config.model.rank, config.model.layers, tag=tag)
        first_seed = member_seeds(seed, config.ensemble_size)[0]
        first_init = init_adapters(base, config.model.rank, np.random.default_rng(first_seed), config.model.layers)
        result = FitResult(base, make_posterior_spec(first_init, config.prior))
        for i, member in enumerate(members):
            result.add("member", member.params)
            result.trace += [(f"member{i}", *row) for row in member.trace]
        result.info["final_log_posterior"] = [m.trace[-1][1] for m in members]
        return result

    init = init_adapters(base, config.model.rank, init_rng, config.model.layers)
    spec = make_posterior_spec(init, config.prior)
    trained = riemannian_map(base, spec, splits.train, train_config, init, tag=tag)
    result = FitResult(base, spec)
    result.add("map", trained.params)
    result.trace += [("map", *row) for row in trained.trace]
    result.info.update({
        "final_log_posterior": trained.trace[-1][1],
        "steps": len(trained.trace),
        "map_sigma": np.concatenate([a.sigma for a in trained.params]),
        "sigma_trajectory": np.stack(trained.sigma_trajectory),
    })
    if config.method == "map_only":
        return result

    subset, scale = hessian_subset(splits.train, train_config.hessian_points, seed)
    if config.method == "gauss_proj":
        post = ambient_laplace(base, spec, subset, trained.params, train_config.hessian_mode, scale, tag=tag)
        samples = gauss_proj_sample(post, config.samples, sample_rng)
    else:
        post = tangent_hessian(base, spec, subset, trained.params, train_config.hessian_mode, scale,
                               config.components, tag=tag)
        samples = laplace_sample(post, config.samples, sample_rng)
        result.info["damping"] = max(post.damping)
        result.info["sigma_precision"] = np.concatenate(post.sigma_precision)
    result.info["hessian_mode"] = train_config.hessian_mode
    for params in samples.samples:
        result.add("sample", params)

    if config.method == "sba_distilled":
        distill_config = config.distill.model_copy(update={"seed": seed})
        student = distill(base, samples, trained.params, splits.train.inputs, distill_config, tag=f"{tag}-distill")
        result.add("student", student.params)
        result.trace += [("student", *row) for row in student.trace]
        result.info["distill_kl"] = distillation_kl(base, samples, student.params, splits.train.inputs,
                                                    distill_config.temperature)
    return result


def evaluate(base, sample_set, splits, config, seed, tag, out_dir=None, prefix=""):
    """Calibration, selective prediction and decomposition metrics on the ID and shifted splits, plus OOD AUROC."""
    metrics, ood_parts = {}, {}
    for name in EVAL_SPLITS:
        batch = getattr(splits, name)
        if len(batch) == 0:
            raise ConfigError(f"split {name} is missing or empty", field_path="data")
        table = per_sample_probs(base, sample_set, batch.inputs)
        probs = predictive(base, sample_set, batch.inputs)
        metrics[name], report, _ = split_metrics(probs, batch.labels, table, selective_score=config.selective_score,
                                                 tag=tag)
        if out_dir:
            reliability_bins_csv(report, os.path.join(out_dir, f"reliability-{prefix}{name}-seed{seed}.csv"))
        if name == "test_id":
            ood_parts["id"] = uncertainty_scores(probs, table, config.ood_score)
    if splits.test_ood.shape[0] == 0:
        raise ConfigError("split test_ood is missing or empty", field_path="data")
    table = per_sample_probs(base, sample_set, splits.test_ood)
    probs = predictive(base, sample_set, splits.test_ood)
    metrics["ood_auroc"] = ood_auroc(ood_parts["id"], uncertainty_scores(probs, table, config.ood_score))
    logging.info(f"[{tag}] ECE id {metrics['test_id']['ece']:.4f} shift {metrics['test_shift']['ece']:.4f}, "
                 f"OOD AUROC {metrics['ood_auroc']:.4f}")
    return metrics


def write_trace(path, trace):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRACE_COLUMNS)
        for label, step, value, grad_norm in trace:
            writer.writerow([label, step, repr(float(value)), repr(float(grad_norm))])


def _record(config, seed, **fields):
    return {"seed": seed, "method": config.method, "config_hash": config_hash(config),
            "config": config.model_dump(mode="json"), **fields}


def train_unit(config, seed, out_dir):
    tag = f"{config.method}-seed{seed}"
    data_spec = data_for_seed(config, seed)
    splits = generate(data_spec)
    result = fit(config, seed, splits, tag)
    path = checkpoint_path(out_dir, config.method, seed)
    metadata = to_jsonable({
        "method": config.method,
        "seed": seed,
        "roles": result.roles,
        "data": data_spec.model_dump(mode="json"),
        "config_hash": config_hash(config),
        "info": result.info,
    })
    save_checkpoint(path, result.base, result.parameter_sets, result.spec, config.prior, metadata)
    write_trace(os.path.join(out_dir, f"trace-{config.method}-seed{seed}.csv"), result.trace)
    save_dataset(os.path.join(out_dir, f"data-seed{seed}.csv"), data_spec, splits)
    logging.info(f"[{tag}] Checkpoint with {len(result.roles)} parameter sets written to {path}")
    return _record(config, seed, kind="train", checkpoint=os.path.basename(path), n_sets=len(result.roles),
                   info=result.info)


def _checkpoint_splits(checkpoint, data_path, tag):
    spec = DataSpec.model_validate(checkpoint["metadata"]["data"])
    if data_path is None:
        return generate(spec)
    cached_spec, splits = load_dataset(data_path)
    if cached_spec != spec:
        logging.warning(f"[{tag}] Cached data {data_path} was generated from a different spec than the checkpoint")
    if cached_spec.d_in != checkpoint["base"].d_in:
        raise ConfigError(f"data has d_in={cached_spec.d_in}, checkpoint expects {checkpoint['base'].d_in}",
                          field_path="data.d_in")
    return splits


def checkpoint_sample_set(checkpoint, method):
    role = EVAL_ROLES[method]
    roles = checkpoint["metadata"]["roles"]
    sets = [p for p, r in zip(checkpoint["parameter_sets"], roles) if r == role]
    if not sets:
        raise ConfigError(f"checkpoint of method {checkpoint['metadata']['method']} has no '{role}' parameter sets "
                          f"for method {method}", field_path="method")
    return PosteriorSampleSet(tuple(sets))


def eval_unit(config, path, method, data_path, out_dir):
    checkpoint = load_checkpoint(path)
    seed = checkpoint["metadata"]["seed"]
    method = method or checkpoint["metadata"]["method"]
    tag = f"eval-{method}-seed{seed}"
    splits = _checkpoint_splits(checkpoint, data_path, tag)
    sample_set = checkpoint_sample_set(checkpoint, method)
    metrics = evaluate(checkpoint["base"], sample_set, splits, config, seed, tag, out_dir, prefix=f"{method}-")
    return {"kind": "seed", "seed": seed, "method": method, "checkpoint": os.path.basename(path),
            "checkpoint_config_hash": checkpoint["metadata"]["config_hash"], "config_hash": config_hash(config),
            "config": config.model_dump(mode="json"), "S": sample_set.S, "metrics": metrics}


def pipeline_unit(config, seed, point=None):
    """Fit and evaluate in one process: the unit of every ablation grid."""
    tag = f"{config.method}-seed{seed}" + ("" if point is None else f"-{point['axis']}={point['value']}")
    splits = generate(data_for_seed(config, seed))
    result = fit(config, seed, splits, tag)
    sample_set = result.sample_set(EVAL_ROLES[config.method])
    metrics = evaluate(result.base, sample_set, splits, config, seed, tag)
    return _record(config, seed, kind="seed", point=point, S=sample_set.S, metrics=metrics)


def run_grid(logger, units, worker, workers):
    """Run worker(*args) for every (unit, description, args); failures are logged and the grid continues."""
    logger.start()
    try:
        if workers <= 1:
            for unit, description, args in units:
                try:
                    logger.record(unit, {"command": logger.command, "unit": unit, **worker(*args)})
                except Exception as e:
                    logger.record_failure(unit, description, e)
        else:
            with ProcessPoolExecutor(max_workers=workers) as executor:
                futures = {executor.submit(worker, *args): (unit, description) for unit, description, args in units}
                for future in as_completed(futures):
                    unit, description = futures[future]
                    try:
                        logger.record(unit, {"command": logger.command, "unit": unit, **future.result()})
                    except Exception as e:
                        logger.record_failure(unit, description, e)
    finally:
        logger.stop()
    return logger


def aggregate(payloads, command, point=None):
    """Mean, std and coefficient of variation across seeds of every numeric metric."""
    values = defaultdict(list)
    for payload in payloads:
        for key, value in flatten(payload.get("metrics", {})).items():
            if isinstance(value, (int, float)) and not isinstance(value, bool):
                values[key].append(value)
    methods = sorted({p["method"] for p in payloads})
    return {
        "kind": "aggregate",
        "command": command,
        "point": point,
        "method": methods[0] if len(methods) == 1 else methods,
        "seeds": [p["seed"] for p in payloads],
        "metrics": {key: mean_std_cv(v) for key, v in sorted(values.items())},
    }


def _finish(logger, extra_payloads, output_format, tolerate_partial=False):
    path = logger.write_results(extra_payloads)
    if output_format == "csv":
        results_to_csv(path)
    failures = logger.failures()
    if not failures or (tolerate_partial and logger.payloads()):
        return EXIT_OK
    return max(f["exit_code"] for f in failures)


def cmd_train(config, out_dir, workers=1, output_format="json"):
    logger = ExperimentLogger("train", len(config.seeds), out_dir)
    units = [(i, {"seed": seed}, (config, seed, out_dir)) for i, seed in enumerate(config.seeds)]
    run_grid(logger, units, train_unit, workers)
    return _finish(logger, [], output_format)


def cmd_eval(config, out_dir, checkpoints=None, method=None, data_path=None, workers=1, output_format="json"):
    checkpoints = checkpoints or [checkpoint_path(out_dir, config.method, seed) for seed in config.seeds]
    for path in checkpoints:
        if not os.path.exists(path):
            raise ConfigError(f"checkpoint {path} does not exist; run train first", field_path="checkpoint")
    logger = ExperimentLogger("eval", len(checkpoints), out_dir)
    units = [(i, {"checkpoint": os.path.basename(p)}, (config, p, method, data_path, out_dir))
             for i, p in enumerate(checkpoints)]
    run_grid(logger, units, eval_unit, workers)
    payloads = logger.payloads()
    return _finish(logger, [aggregate(payloads, "eval")] if payloads else [], output_format)


def cmd_ablate(config, axis, out_dir, grid=None, workers=1, output_format="json"):
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis '{axis}', expected one of {ABLATION_AXES}", field_path="axis")
    grid = list(grid if grid is not None else getattr(config.ablation, axis))
    if not grid:
        raise ConfigError("ablation grid is empty", field_path=f"ablation.{axis}")
    command = f"ablate-{axis}"
    logger = ExperimentLogger(command, len(grid) * len(config.seeds), out_dir)
    units, unit = [], 0
    for value in grid:
        point = {"axis": axis, "value": value}
        try:
            point_config = override(config, AXIS_FIELDS[axis], value)
        except ConfigError as e:
            for seed in config.seeds:
                logger.record_failure(unit, {**point, "seed": seed}, e)
                unit += 1
            continue
        for seed in point_config.seeds:
            units.append((unit, {**point, "seed": seed}, (point_config, seed, point)))
            unit += 1
    run_grid(logger, units, pipeline_unit, workers)
    by_point = defaultdict(list)
    for payload in logger.payloads():
        by_point[repr(payload["point"]["value"])].append(payload)
    aggregates = [aggregate(by_point[repr(v)], command, {"axis": axis, "value": v})
                  for v in grid if by_point[repr(v)]]
    return _finish(logger, aggregates, output_format, tolerate_partial=True)


def klgap_unit(geometry):
    (result,) = kl_gap_grid(geometry)
    return {"kind": "klgap", **result.to_dict(), "config": geometry.model_dump(mode="json")}


def klgap_summary(payloads):
    rows = sorted(payloads, key=lambda p: p["normal_scale"])
    gaps = [p["gap"] for p in rows]
    return {
        "kind": "aggregate",
        "command": "klgap",
        "zero_rows_within_2se": all(abs(p["gap"]) <= 2 * p["stderr"] for p in rows if p["trace_sigma_n"] == 0.0),
        "positive_rows_at_3se": all(p["gap"] > 3 * p["stderr"] for p in rows if p["trace_sigma_n"] > 0.0),
        "monotone": all(b >= a for a, b in zip(gaps, gaps[1:])),
        "normal_scales": [p["normal_scale"] for p in rows],
        "gaps": gaps,
    }


def cmd_klgap(config, out_dir, workers=1, output_format="json"):
    geometry = config.geometry
    logger = ExperimentLogger("klgap", len(geometry.normal_scales), out_dir)
    units = [(i, {"normal_scale": s}, (geometry.model_copy(update={"normal_scales": (s,)}),))
             for i, s in enumerate(geometry.normal_scales)]
    run_grid(logger, units, klgap_unit, workers)
    payloads = logger.payloads()
    return _finish(logger, [klgap_summary(payloads)] if payloads else [], output_format)


def cmd_verify_geometry(out_dir, seed=0, trials=1000, corrupt_delta=False, output_format="json"):
    """Geometry identities over random probes; VerificationError when any check fails."""
    logger = ExperimentLogger("verify-geometry", 1, out_dir)
    report = verify_geometry(trials=trials, seed=seed, corrupt_delta=corrupt_delta)
    logger.record(0, {"command": "verify-geometry", "unit": 0, "kind": "verification", **report})
    _finish(logger, [], output_format)
    if not report["passed"]:
        raise VerificationError(f"{report['tangency_failures']} tangency and {report['slope_failures']} slope "
                                f"failures over {trials} probes (min slope {report['min_slope']:.3f})", report)
    return EXIT_OK


def normalizer_unit(d, k, kappa, n_mc, method, seed, tolerance):
    rng = np.random.default_rng(seed)
    F = kappa * haar_sample(d, k, rng).data
    report = log_normalizer_report(F, n_mc, rng, method=method)
    gap = abs(report["saddlepoint"] - report["monte_carlo"])
    within_noise = gap <= 3.0 * report["stderr"]
    passed = None if tolerance is None else bool(report["rel_error"] < tolerance or within_noise)
    needed = None
    if tolerance is not None and report["monte_carlo"] != 0.0 and math.isfinite(report["stderr"]):
        needed = samples_for_precision(report["stderr"] * math.sqrt(n_mc), tolerance * abs(report["monte_carlo"]) / 3.0)
    logging.info(f"[normalizer] d={d} k={k} kappa0={kappa}: relative error {report['rel_error']:.2e} "
                 f"(tolerance {tolerance}) {'' if passed is None else ('pass' if passed else 'FAIL')}")
    return {"kind": "normalizer", "d": d, "k": k, "kappa0": kappa, "n_mc": n_mc, "method": method, **report,
            "tolerance": tolerance, "within_3se": bool(within_noise), "passed": passed, "samples_needed": needed}


def cmd_validate_normalizer(config, out_dir, workers=1, output_format="json"):
    grid = config.normalizer
    points = [(d, k, kappa) for d in grid.dims for k in grid.ranks for kappa in grid.kappas]
    seeds = [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(grid.seed).spawn(len(points))]
    logger = ExperimentLogger("validate-normalizer", len(points), out_dir)
    units = [(i, {"d": d, "k": k, "kappa0": kappa},
              (d, k, kappa, grid.n_mc, grid.method, seeds[i], grid.tolerance(d)))
             for i, (d, k, kappa) in enumerate(points)]
    run_grid(logger, units, normalizer_unit, workers)
    payloads = logger.payloads()
    failed = [p for p in payloads if p["passed"] is False]
    summary = {"kind": "aggregate", "command": "validate-normalizer", "rows": len(payloads),
               "checked": sum(p["passed"] is not None for p in payloads), "failed": len(failed),
               "max_rel_error_by_d": {str(d): max((p["rel_error"] for p in payloads if p["d"] == d), default=None)
                                      for d in grid.dims}}
    status = _finish(logger, [summary], output_format)
    if failed:
        raise VerificationError(f"{len(failed)} normalizer grid points exceed their tolerance", summary)
    return status


def distill_unit(config, path, out_dir):
    teacher = load_checkpoint(path)
    metadata = teacher["metadata"]
    if metadata["method"] != "sba":
        raise ConfigError(f"teacher checkpoint {os.path.basename(path)} has method {metadata['method']}, expected sba",
                          field_path="method")
    seed = metadata["seed"]
    tag = f"distill-seed{seed}"
    splits = _checkpoint_splits(teacher, None, tag)
    base = teacher["base"]
    map_set = checkpoint_sample_set(teacher, "map_only")
    samples = checkpoint_sample_set(teacher, "sba")
    map_params = map_set.samples[0]
    distill_config = config.distill.model_copy(update={"seed": seed})
    inputs = splits.train.inputs
    kl_init = distillation_kl(base, samples, map_params, inputs, distill_config.temperature)
    student = distill(base, samples, map_params, inputs, distill_config, tag=tag)
    kl_final = distillation_kl(base, samples, student.params, inputs, distill_config.temperature)

    roles = ["map"] + ["sample"] * samples.S + ["student"]
    sets = [list(map_params)] + [list(s) for s in samples.samples] + [list(student.params)]
    out_path = checkpoint_path(out_dir, "sba_distilled", seed)
    save_checkpoint(out_path, base, sets, teacher["spec"], teacher["prior"],
                    to_jsonable({**metadata, "method": "sba_distilled", "roles": roles,
                                 "teacher": os.path.basename(path), "config_hash": config_hash(config)}))
    write_trace(os.path.join(out_dir, f"trace-sba_distilled-seed{seed}.csv"), [("student", *r) for r in student.trace])

    metrics = {name: evaluate(base, s, splits, config, seed, f"{tag}-{name}")
               for name, s in [("map", map_set), ("student", PosteriorSampleSet((student.params,))), ("sba", samples)]}
    ece = {name: metrics[name]["test_shift"]["ece"] for name in metrics}
    ordering = ece["map"] >= ece["student"] >= ece["sba"]
    log = logging.info if ordering else logging.warning
    log(f"[{tag}] Shifted-split ECE MAP {ece['map']:.4f}, distilled {ece['student']:.4f}, SBA {ece['sba']:.4f}")
    return {"kind": "distill", "seed": seed, "method": "sba_distilled", "teacher": os.path.basename(path),
            "checkpoint": os.path.basename(out_path), "config_hash": config_hash(config),
            "config": config.model_dump(mode="json"), "temperature": distill_config.temperature,
            "kl_init": kl_init, "kl_final": kl_final, "shift_ece": ece, "ece_ordering_holds": ordering,
            "metrics": metrics}


def cmd_distill(config, out_dir, teachers=None, workers=1, output_format="json"):
    teachers = teachers or [checkpoint_path(out_dir, "sba", seed) for seed in config.seeds]
    for path in teachers:
        if not os.path.exists(path):
            raise ConfigError(f"teacher checkpoint {path} does not exist; train with method sba first",
                              field_path="checkpoint")
    logger = ExperimentLogger("distill", len(teachers), out_dir)
    units = [(i, {"teacher": os.path.basename(p)}, (config, p, out_dir)) for i, p in enumerate(teachers)]
    run_grid(logger, units, distill_unit, workers)
    payloads = logger.payloads()
    return _finish(logger, [aggregate(payloads, "distill")] if payloads else [], output_format)
