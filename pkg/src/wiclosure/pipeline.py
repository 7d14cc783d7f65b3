"""End-to-end run: simulate, solve, select links, search overlap, gate, evaluate."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

from .candidates import (CandidateSet, EvalReport, Stopwatch, brute_force_candidate_set,
                         build_candidate_set, empty_candidate_set, evaluate)
from .overlap import SearchParams, find_overlap_clusters
from .pcm import build_realization, default_gamma
from .pose_graph import (ConvergenceError, LinkPriors, SharedEstimate, shared_from_realization,
                         solve_mle)
from .sim_io import ScenarioConfig, ScenarioData, synthesize

log = logging.getLogger(__name__)

STAGES = ("simulate", "solve", "pcm", "prune", "gate", "evaluate")


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def check_stages(stages, brute_force: bool = False) -> tuple:
    """Validate a stage selection and return it in pipeline order."""
    stages = tuple(dict.fromkeys(stages))
    unknown = set(stages) - set(STAGES)
    if unknown:
        raise ValueError(f"unknown stage(s): {sorted(unknown)}")
    for st in stages:
        for need in STAGES[:STAGES.index(st)]:
            if need == "prune" and brute_force:
                continue
            if need not in stages:
                raise ValueError(f"stage {st!r} needs stage {need!r}")
    return tuple(st for st in STAGES if st in stages)


@dataclass
class PipelineResult:
    config: ScenarioConfig
    data: ScenarioData
    realization: Optional[object] = None
    graph: Optional[object] = None
    shared: Optional[SharedEstimate] = None
    params: Optional[SearchParams] = None
    clusters: list = field(default_factory=list)
    candidates: Optional[CandidateSet] = None
    report: Optional[EvalReport] = None
    timings: dict = field(default_factory=dict)


def priors_from_config(config: ScenarioConfig) -> LinkPriors:
    return LinkPriors(z_std=config.z_prior_std, tilt_std=config.tilt_prior_std, debiased=True)


def pcm_gamma(config: ScenarioConfig) -> float:
    if config.gamma is not None:
        return config.gamma
    return default_gamma(3, config.pcm_confidence)


def run_pipeline(config: ScenarioConfig, stages=STAGES, brute_force: bool = False,
                 data: Optional[ScenarioData] = None) -> PipelineResult:
    """Run the selected stages in order.

    With ``brute_force`` the prune stage is skipped and every cross-robot
    pair goes through the gate.
    """
    stages = check_stages(stages, brute_force)
    if brute_force:
        stages = tuple(st for st in stages if st != "prune")
    watch = Stopwatch()
    out = PipelineResult(config, data, timings=watch.timings)
    if "simulate" not in stages:
        return out
    priors = priors_from_config(config)
    for stage in stages:
        with watch(stage):
            try:
                _STAGE_FUNCS[stage](out, priors, brute_force)
            except Exception as exc:
                if isinstance(exc, (ConvergenceError, StageError)):
                    raise
                raise StageError(stage, exc) from exc
    if out.report is not None:
        out.report.timings = dict(watch.timings)
    return out


def _simulate(out, priors, brute_force):
    if out.data is None:
        out.data = synthesize(out.config)


def _solve(out, priors, brute_force):
    for t in out.data.trajectories:
        solve_mle(t)


def _pcm(out, priors, brute_force):
    d, config = out.data, out.config
    out.realization, out.graph = build_realization(d.measurements, d.alpha, d.beta,
                                                   gamma=pcm_gamma(config), priors=priors)
    if len(out.realization) == 0:
        log.warning("no consistent link: the robots cannot be related, G will be empty")
        return
    out.shared = shared_from_realization(d.alpha, d.beta, d.measurements, out.realization,
                                         priors)


def _params(config):
    return SearchParams(D=config.d_threshold, sensor_range=config.sensor_range,
                        k_split=config.k_split, min_cluster=config.min_cluster,
                        max_depth=config.max_depth)


def _prune(out, priors, brute_force):
    out.params = _params(out.config)
    if out.shared is not None:
        out.clusters = find_overlap_clusters(out.data.alpha, out.data.beta, out.shared,
                                             out.params)


def _gate(out, priors, brute_force):
    config = out.config
    if out.shared is None:
        out.candidates = empty_candidate_set(out.realization, config.d_threshold,
                                             config.sensor_range)
    elif brute_force:
        out.candidates = brute_force_candidate_set(out.shared, out.realization,
                                                   config.d_threshold, config.sensor_range)
    else:
        out.candidates = build_candidate_set(out.clusters, out.shared, out.realization,
                                             config.d_threshold, config.sensor_range)


def _evaluate(out, priors, brute_force):
    gt_a, gt_b = out.data.ground_truth
    out.report = evaluate(out.candidates, gt_a, gt_b, out.config.true_lc_radius)
    out.report.seed = out.config.seed
    if out.params is not None and out.params.sigma_ub is not None:
        out.report.sigma_ub = float(out.params.sigma_ub)


_STAGE_FUNCS = {"simulate": _simulate, "solve": _solve, "pcm": _pcm, "prune": _prune,
                "gate": _gate, "evaluate": _evaluate}
