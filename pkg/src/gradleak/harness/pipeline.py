"""End-to-end experiment: train, compute proxies, attack, score, correlate."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from ..attack import AttackResult, run_attack
from ..errors import AttackFailedError, ContractError, InsufficientDataError
from ..gradmatch import GradLossKind, GradTarget, ImageShape
from ..lavp import PROXY_NAMES, ProxyRecord, compute_proxies
from ..metrics import SimilarityScores, similarity_scores, spearman
from ..smallnet import Weights, load_weights, train_sgd
from ..tensorcore import SeededRng
from .config import ExperimentConfig
from .data import SyntheticParams, gen_synthetic, load_idx

log = logging.getLogger(__name__)

SCORE_NAMES = ("mse", "ssim", "psnr")

# stream prefixes under the master seed
STREAM_TRAIN_DATA, STREAM_TRAIN, STREAM_EVAL_DATA, STREAM_PROXY, STREAM_ATTACK = range(1, 6)


@dataclass
class ReportRow:
    sample_id: int
    label: int
    proxies: ProxyRecord
    scores: dict = field(default_factory=dict)      # kind -> SimilarityScores
    gm_final: dict = field(default_factory=dict)    # kind -> float
    failures: dict = field(default_factory=dict)    # kind -> reason

    @property
    def status(self) -> str:
        if not self.failures:
            return "ok"
        return ";".join(f"failed_{k.value}:{r}" for k, r in sorted(
            self.failures.items(), key=lambda kv: kv[0].value))


@dataclass
class CorrelationReport:
    """Spearman coefficients, rows = proxies, columns = ``<score>_<kind>``."""

    proxies: tuple
    columns: tuple
    matrix: np.ndarray
    sample_counts: dict
    config_digest: str = ""

    def get(self, proxy: str, column: str) -> float:
        return float(self.matrix[self.proxies.index(proxy), self.columns.index(column)])

    def __eq__(self, other):
        return (
            isinstance(other, CorrelationReport)
            and self.proxies == other.proxies
            and self.columns == other.columns
            and np.array_equal(self.matrix, other.matrix, equal_nan=True)
        )


@dataclass
class ExperimentResult:
    rows: list
    report: CorrelationReport
    weights: Weights
    attacks: dict = field(default_factory=dict)   # (sample_id, kind) -> AttackResult


def image_shape(cfg: ExperimentConfig) -> ImageShape:
    return ImageShape(cfg.data.height, cfg.data.width)


def load_samples(cfg: ExperimentConfig):
    """``(train, eval)`` sample lists per the data section."""
    d = cfg.data
    n_classes = cfg.model.layer_sizes[-1]
    master = SeededRng(cfg.master_seed)
    if d.source == "synthetic":
        base = SyntheticParams(count=0, height=d.height, width=d.width,
                               classes=n_classes, sigma=d.sigma, noise=d.noise, ring=d.ring)
        train = gen_synthetic(_with_count(base, cfg.model.train_count),
                              master.child(STREAM_TRAIN_DATA), n_classes)
        evals = gen_synthetic(_with_count(base, d.sample_count),
                              master.child(STREAM_EVAL_DATA), n_classes)
        return train, evals
    size = (d.height, d.width)
    evals = load_idx(d.idx_images, d.idx_labels, d.sample_count, size, d.idx_crop)
    if d.idx_train_images and d.idx_train_labels:
        train = load_idx(d.idx_train_images, d.idx_train_labels,
                         cfg.model.train_count, size, d.idx_crop)
    else:
        train = evals
    for s in train + evals:
        if s.y >= n_classes:
            raise ContractError(f"label {s.y} exceeds the model's {n_classes} classes")
    if len(evals) < 2:
        raise InsufficientDataError("fewer than 2 evaluation samples in the IDX files")
    return train, evals


def _with_count(params, count):
    return replace(params, count=count)


def train_model(cfg: ExperimentConfig, train=None) -> Weights:
    if cfg.model.weights:
        return load_weights(cfg.model.weights)
    if train is None:
        train, _ = load_samples(cfg)
    return train_sgd(cfg.model.net_spec(), train, cfg.model.epochs, cfg.model.lr,
                     SeededRng(cfg.master_seed).child(STREAM_TRAIN),
                     batch_size=cfg.model.batch_size)


def sample_proxies(cfg, w, sample, sample_id) -> ProxyRecord:
    rng = SeededRng(cfg.master_seed).child(STREAM_PROXY, sample_id)
    return compute_proxies(w, sample, sample_id, cfg.proxy, rng=rng)


def sample_attack(cfg, w, sample, sample_id, kind, target=None) -> AttackResult:
    kind = GradLossKind.parse(kind)
    target = target if target is not None else GradTarget.from_sample(w, sample)
    k_idx = 0 if kind is GradLossKind.L2 else 1
    rng = SeededRng(cfg.master_seed).child(STREAM_ATTACK, sample_id, k_idx)
    return run_attack(cfg.attack[kind], w, target, sample, image_shape(cfg), rng=rng)


def _process_sample(job):
    cfg, w, sample, sample_id, run_attacks = job
    proxies = sample_proxies(cfg, w, sample, sample_id)
    row = ReportRow(sample_id, sample.y, proxies)
    attacks = {}
    if run_attacks:
        target = GradTarget.from_sample(w, sample)
        for kind in cfg.kinds:
            try:
                res = sample_attack(cfg, w, sample, sample_id, kind, target)
            except AttackFailedError as exc:
                row.failures[kind] = str(exc).replace(";", ",")
                continue
            attacks[kind] = res
            row.scores[kind] = similarity_scores(res.x_rec, sample.x, image_shape(cfg))
            row.gm_final[kind] = res.final_gm_loss
    return row, attacks


def compute_correlations(rows, kinds, digest="") -> CorrelationReport:
    """Spearman of every proxy against every score, per attack kind.

    Rows whose attack failed for a kind are excluded from that kind's
    columns.  Coefficients that are undefined (a constant column) are NaN.
    """
    kinds = tuple(GradLossKind.parse(k) for k in kinds)
    columns = tuple(f"{s}_{k.value}" for k in kinds for s in SCORE_NAMES)
    matrix = np.full((len(PROXY_NAMES), len(columns)), math.nan)
    counts = {}
    for kind in kinds:
        usable = [r for r in rows if kind in r.scores]
        counts[kind.value] = len(usable)
        if len(usable) < 2:
            raise InsufficientDataError(
                f"insufficient usable rows for {kind.value}: {len(usable)} of {len(rows)}"
            )
        for i, proxy in enumerate(PROXY_NAMES):
            pv = [getattr(r.proxies, proxy) for r in usable]
            for s in SCORE_NAMES:
                sv = [getattr(r.scores[kind], s) for r in usable]
                try:
                    matrix[i, columns.index(f"{s}_{kind.value}")] = spearman(pv, sv)
                except InsufficientDataError:
                    log.warning("Spearman undefined for %s vs %s_%s", proxy, s, kind.value)
    return CorrelationReport(PROXY_NAMES, columns, matrix, counts, digest)


def run_experiment(cfg: ExperimentConfig, run_attacks=True, weights=None) -> ExperimentResult:
    """Full pipeline.  Deterministic given ``cfg`` (worker count included or not)."""
    train, evals = load_samples(cfg)
    w = weights if weights is not None else train_model(cfg, train)
    jobs = [(cfg, w, s, i, run_attacks) for i, s in enumerate(evals)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            results = list(pool.map(_process_sample, jobs))
    else:
        results = [_process_sample(job) for job in jobs]
    rows = [r for r, _ in results]
    attacks = {(r.sample_id, k): a for r, (_, at) in zip(rows, results) for k, a in at.items()}
    report = None
    if run_attacks:
        report = compute_correlations(rows, cfg.kinds, cfg.digest())
    return ExperimentResult(rows, report, w, attacks)
