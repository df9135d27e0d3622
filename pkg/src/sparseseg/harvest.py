"""MC-dropout uncertainty, pseudo-label harvesting, evaluation, and the A-E pipeline."""

from __future__ import annotations

import dataclasses
import json
import logging
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import bottleneck as vb
from .geometry import DEFAULT_DECIMATION_TARGET, DEFAULT_DELTA, DEFAULT_NORMAL_NEIGHBORS
from .mixtures import DEFAULT_EM_ITERATIONS, MIN_SAMPLES, MixtureFitError, fit_mixture_em, reliable_posterior
from .scene import PredictionField, PseudoLabelSet, SceneMesh, SparseLabelSet, save_pseudo_labels
from .spectral import DEFAULT_EMBEDDING_LENGTH, SpectralConfig, spectrum_distances
from .transforms import DEFAULT_FPS_TARGET

log = logging.getLogger(__name__)

STRATEGIES = ("uncertainty", "spectrum", "joint")
DEFAULT_PASSES = 10
DEFAULT_DROPOUT = 0.5


# ---------------------------------------------------------------------------
# uncertainty


@dataclass(frozen=True, eq=False)
class UncertaintyField:
    values: np.ndarray
    passes: int
    dropout_rate: float
    mean_logits: np.ndarray

    def __post_init__(self):
        if self.passes < 2:
            raise ValueError("need at least two passes")
        if np.any(self.values < 0):
            raise ValueError("uncertainty must be non-negative")

    @property
    def predicted(self) -> np.ndarray:
        return np.argmax(self.mean_logits, axis=1)


def uncertainty_from_passes(logit_stack: np.ndarray, mode: str = "winning") -> tuple[np.ndarray, np.ndarray]:
    """Reduce a (T, N, C) stack of logits to (per-vertex uncertainty, mean logits).

    ``winning``: population variance of the mean-argmax class logit.
    ``trace``: mean over classes of the per-class logit variances.
    """
    stack = np.asarray(logit_stack, dtype=np.float64)
    mean = stack.mean(axis=0)
    var = stack.var(axis=0)
    if mode == "winning":
        unc = var[np.arange(var.shape[0]), np.argmax(mean, axis=1)]
    elif mode == "trace":
        unc = var.mean(axis=1)
    else:
        raise ValueError(f"unknown uncertainty mode {mode!r}")
    return unc, mean


def mc_dropout_uncertainty(model: vb.EncoderParams | Callable, cloud: SceneMesh, passes: int = DEFAULT_PASSES,
                           dropout_rate: float = DEFAULT_DROPOUT, seed: int = 0,
                           mode: str = "winning") -> UncertaintyField:
    """Run ``passes`` stochastic forward passes with dropout active.

    ``model`` is either encoder parameters with a classifier head, or a
    callable ``(cloud, pass_seed) -> (N, C) logits``.
    """
    if passes < 2:
        raise ValueError("need at least two passes")
    if isinstance(model, vb.EncoderParams):
        params = dataclasses.replace(model, dropout_rate=dropout_rate)

        def predict(c, s):
            return vb.classify(params, c, dropout_on=True, seed=s)
    else:
        predict = model
    stack = np.stack([predict(cloud, vb._subseed(seed, 41, t)) for t in range(passes)])
    unc, mean = uncertainty_from_passes(stack, mode)
    return UncertaintyField(unc, passes, dropout_rate, mean)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class VBSection:
    lam: float
    feature_dim: int = 256
    fps_target: int = DEFAULT_FPS_TARGET
    squared_norm: bool = True
    steps: int = 20000
    lr: float = 0.1
    momentum: float = 0.99
    poly_power: float = 0.9

    def config(self) -> vb.VBConfig:
        return vb.VBConfig(self.lam, self.feature_dim, self.fps_target, self.squared_norm, self.lr,
                           self.momentum, max(self.steps, 1), self.poly_power)


@dataclass(frozen=True)
class EncoderSection:
    hidden: tuple[int, ...] = (64, 64)


@dataclass(frozen=True)
class FinetuneSection:
    epochs: int = 30000
    lr: float = 0.1
    momentum: float = 0.99
    poly_power: float = 0.9

    def config(self) -> vb.FinetuneConfig:
        return vb.FinetuneConfig(self.lr, self.momentum, max(self.epochs, 1), self.poly_power)


@dataclass(frozen=True)
class GeometrySection:
    decimation_target: int = DEFAULT_DECIMATION_TARGET
    delta: float = DEFAULT_DELTA
    heat_time_scale: float = 1.0
    normal_neighbors: int = DEFAULT_NORMAL_NEIGHBORS


@dataclass(frozen=True)
class SpectralSection:
    embedding_length: int = DEFAULT_EMBEDDING_LENGTH
    auto_sigma: bool = True
    sigma: float = 1.0


@dataclass(frozen=True)
class UncertaintySection:
    passes: int = DEFAULT_PASSES
    dropout_rate: float = DEFAULT_DROPOUT
    mode: str = "winning"


@dataclass(frozen=True)
class HarvestSection:
    strategy: str = "joint"
    em_iterations: int = DEFAULT_EM_ITERATIONS
    min_category_size: int = MIN_SAMPLES


@dataclass(frozen=True)
class StagesSection:
    harvest: bool = True
    restart_from_pretrain: bool = False


@dataclass(frozen=True)
class PipelineConfig:
    vb: VBSection
    num_categories: int = 20
    annotation_budget: int = 20
    seed: int = 0
    encoder: EncoderSection = field(default_factory=EncoderSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    geometry: GeometrySection = field(default_factory=GeometrySection)
    spectral: SpectralSection = field(default_factory=SpectralSection)
    uncertainty: UncertaintySection = field(default_factory=UncertaintySection)
    harvest: HarvestSection = field(default_factory=HarvestSection)
    stages: StagesSection = field(default_factory=StagesSection)

    def __post_init__(self):
        self.vb.config()  # validates lam, dims
        if self.num_categories < 1:
            raise ValueError("num_categories must be >= 1")
        if not 0 <= self.geometry.delta <= 1:
            raise ValueError("delta must lie in [0, 1]")
        if self.geometry.decimation_target < 4:
            raise ValueError("decimation_target must be >= 4")
        if self.spectral.embedding_length < 1:
            raise ValueError("embedding_length must be >= 1")
        if self.uncertainty.passes < 2:
            raise ValueError("uncertainty passes must be >= 2")
        if not 0 <= self.uncertainty.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.uncertainty.mode not in ("winning", "trace"):
            raise ValueError(f"unknown uncertainty mode {self.uncertainty.mode!r}")
        if self.harvest.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.harvest.em_iterations < 1:
            raise ValueError("em_iterations must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return _build(cls, d, "config")

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def spectral_config(self) -> SpectralConfig:
        return SpectralConfig(self.geometry.decimation_target, self.geometry.delta, self.spectral.embedding_length,
                              self.spectral.auto_sigma, self.spectral.sigma, self.geometry.heat_time_scale)


def _build(cls, d, where: str):
    if not isinstance(d, dict):
        raise ValueError(f"{where}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ValueError(f"{where}: unknown keys {unknown}")
    kw = {}
    for f in dataclasses.fields(cls):
        if f.name not in d:
            if f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
                raise ValueError(f"{where}: missing required key {f.name!r}")
            continue
        tp = hints[f.name]
        val = d[f.name]
        if dataclasses.is_dataclass(tp):
            kw[f.name] = _build(tp, val, f"{where}.{f.name}")
        elif typing.get_origin(tp) is tuple:
            kw[f.name] = tuple(val)
        else:
            kw[f.name] = val
    return cls(**kw)


# ---------------------------------------------------------------------------
# harvesting


def normalize_spectrum(d: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1] over the scene."""
    d = np.asarray(d, dtype=np.float64)
    lo, hi = float(d.min()), float(d.max())
    if hi - lo <= 0:
        return np.zeros_like(d)
    return (d - lo) / (hi - lo)


@dataclass
class HarvestReport:
    pseudo: PseudoLabelSet
    models: dict = field(default_factory=dict)  # category -> MixtureModel
    skipped: dict = field(default_factory=dict)  # category -> reason


def harvest_pseudo_labels(pred: PredictionField | np.ndarray, unc: UncertaintyField | np.ndarray | None,
                          spec: np.ndarray | None, cfg: PipelineConfig | HarvestSection | str,
                          ground_truth: SparseLabelSet | dict | None = None) -> HarvestReport:
    """Keep predictions whose reliable-component posterior is strictly above 0.5.

    One mixture is fitted per predicted category with enough members;
    ground-truth labeled vertices always pass through with posterior 1.
    """
    if isinstance(cfg, PipelineConfig):
        hs = cfg.harvest
    elif isinstance(cfg, str):
        hs = HarvestSection(strategy=cfg)
    else:
        hs = cfg
    predicted = pred.predicted if isinstance(pred, PredictionField) else np.asarray(pred, dtype=np.int64)
    n = len(predicted)
    u = None if unc is None else np.asarray(unc.values if isinstance(unc, UncertaintyField) else unc, np.float64)
    s = None if spec is None else normalize_spectrum(spec)
    for name, arr in (("uncertainty", u), ("spectrum", s)):
        if arr is not None and len(arr) != n:
            raise ValueError(f"{name} field has {len(arr)} entries, predictions have {n}")
    if hs.strategy in ("uncertainty", "joint") and u is None:
        raise ValueError("strategy needs an uncertainty field")
    if hs.strategy in ("spectrum", "joint") and s is None:
        raise ValueError("strategy needs spectrum distances")
    kind = {"uncertainty": "gamma", "spectrum": "beta", "joint": "joint"}[hs.strategy]

    posterior = np.full(n, np.nan)
    report = HarvestReport(PseudoLabelSet.empty())
    for c in np.unique(predicted):
        members = np.flatnonzero(predicted == c)
        if len(members) < hs.min_category_size:
            report.skipped[int(c)] = f"only {len(members)} members"
            continue
        if kind == "gamma":
            x = u[members]
        elif kind == "beta":
            x = s[members]
        else:
            x = np.column_stack([u[members], s[members]])
        try:
            model, _ = fit_mixture_em(x, kind, hs.em_iterations)
        except (MixtureFitError, ValueError, FloatingPointError) as err:
            log.info("category %d skipped: %s", c, err)
            report.skipped[int(c)] = str(err)
            continue
        report.models[int(c)] = model
        posterior[members] = reliable_posterior(model, x)

    keep = np.flatnonzero(np.nan_to_num(posterior, nan=0.0) > 0.5)
    labels = dict(zip(keep.tolist(), predicted[keep].tolist()))
    post = dict(zip(keep.tolist(), posterior[keep].tolist()))
    if ground_truth is not None:
        gt = ground_truth.entries if isinstance(ground_truth, SparseLabelSet) else ground_truth
        for idx, cat in gt.items():
            labels[int(idx)] = int(cat)
            post[int(idx)] = 1.0
    order = sorted(labels)
    report.pseudo = PseudoLabelSet(np.array(order, np.int64), np.array([labels[i] for i in order], np.int64),
                                   np.array([min(max(post[i], 0.0), 1.0) for i in order]))
    return report


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True, eq=False)
class SegMetrics:
    iou: np.ndarray  # per class; NaN where the class is absent from both
    miou: float
    confusion: np.ndarray  # rows ground truth, columns prediction

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "per_class_iou": {str(c): float(v) for c, v in enumerate(self.iou) if np.isfinite(v)},
            "confusion": self.confusion.tolist(),
        }


def evaluate_segmentation(pred: PredictionField | np.ndarray, gt, num_categories: int | None = None) -> SegMetrics:
    """Per-class IoU and their mean over classes present in prediction or ground truth.

    Ground-truth entries below zero are ignored.
    """
    p = pred.predicted if isinstance(pred, PredictionField) else np.asarray(pred, dtype=np.int64)
    g = np.asarray(gt, dtype=np.int64)
    if p.shape != g.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {g.shape}")
    valid = g >= 0
    p, g = p[valid], g[valid]
    C = num_categories or int(max(p.max(initial=-1), g.max(initial=-1)) + 1)
    conf = np.bincount(g * C + p, minlength=C * C).reshape(C, C)
    inter = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - np.diag(conf)
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, np.nan)
    miou = float(np.nanmean(iou)) if np.any(union > 0) else float("nan")
    return SegMetrics(iou, miou, conf)


# ---------------------------------------------------------------------------
# artifacts


def histogram_rows(scene_id: str, predicted: np.ndarray, unc: np.ndarray | None, spec_norm: np.ndarray | None,
                   bins: int = 20) -> list[str]:
    rows = []
    for c in np.unique(predicted):
        members = predicted == c
        for name, arr in (("uncertainty", unc), ("spectrum", spec_norm)):
            if arr is None:
                continue
            vals = arr[members]
            hi = 1.0 if name == "spectrum" else max(float(arr.max()), 1e-12)
            counts, edges = np.histogram(vals, bins=bins, range=(0.0, hi))
            for k in range(bins):
                rows.append(f"{scene_id},{c},{name},{k},{edges[k]:.6g},{edges[k + 1]:.6g},{counts[k]}")
    return rows


HISTOGRAM_HEADER = "scene_id,category,quantity,bin,bin_lo,bin_hi,count"


def write_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def write_uncertainty_csv(unc: UncertaintyField, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("vertex_index,predicted,uncertainty\n")
        for i, (p, v) in enumerate(zip(unc.predicted.tolist(), unc.values.tolist())):
            fh.write(f"{i},{p},{v:.9e}\n")


def read_uncertainty_csv(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1].astype(np.int64), data[:, 2]


def write_spectrum_csv(dist: np.ndarray, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("vertex_index,spectrum_distance\n")
        for i, v in enumerate(np.asarray(dist).tolist()):
            fh.write(f"{i},{v:.9e}\n")


def read_spectrum_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)[:, 1]


# ---------------------------------------------------------------------------
# pipeline


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class PipelineResult:
    pseudo: dict  # scene_id -> PseudoLabelSet
    metrics: SegMetrics | None  # stage E
    baseline_metrics: SegMetrics | None  # stage B model on the same evaluation scenes
    params: vb.EncoderParams
    baseline_params: vb.EncoderParams
    artifacts: dict = field(default_factory=dict)
    pretrain_losses: list = field(default_factory=list)


def _predict(params: vb.EncoderParams, scene: SceneMesh) -> PredictionField:
    return PredictionField(vb.classify(params, scene))


def _evaluate_scenes(params: vb.EncoderParams, scenes: Sequence[SceneMesh], num_categories: int) -> SegMetrics | None:
    preds, gts = [], []
    for sc in scenes:
        if sc.labels is None:
            continue
        preds.append(_predict(params, sc).predicted)
        gts.append(sc.labels)
    if not preds:
        return None
    return evaluate_segmentation(np.concatenate(preds), np.concatenate(gts), num_categories)


def _finetune(params, scenes, labels, cfg: PipelineConfig, seed: int):
    state = cfg.finetune.config().sgd()
    losses = []
    for epoch in range(cfg.finetune.epochs):
        params, loss = vb.finetune_epoch(params, scenes, labels, vb._subseed(seed, epoch), state)
        losses.append(loss)
    return params, losses


def run_pipeline(scenes: Sequence[SceneMesh], labels: Sequence[SparseLabelSet], cfg: PipelineConfig,
                 out_dir=None, eval_scenes: Sequence[SceneMesh] | None = None) -> PipelineResult:
    """Stages A (pretrain), B (fine-tune on sparse labels), C (harvest), D (re-fine-tune), E (evaluate).

    Without ``eval_scenes`` the training scenes' dense labels are used for
    evaluation.  With ``cfg.stages.harvest`` off, stages C and D are skipped
    and the stage-B model is the final model.
    """
    if not scenes:
        raise ValueError("need at least one training scene")
    if len(labels) != len(scenes):
        raise ValueError("need one label set per scene")
    if not any(len(lb) for lb in labels):
        raise ValueError("need at least one sparse label")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    artifacts: dict = {}
    eval_scenes = list(eval_scenes) if eval_scenes is not None else list(scenes)
    seed = cfg.seed
    stage = "A"
    try:
        params = vb.init_encoder(cfg.vb.feature_dim, cfg.encoder.hidden, cfg.uncertainty.dropout_rate,
                                 vb._subseed(seed, 100))
        params_a, pre_losses = vb.pretrain(params, scenes, cfg.vb.config(), cfg.vb.steps, vb._subseed(seed, 101))
        if out is not None:
            vb.save_checkpoint(params_a, out / "pretrain.ckpt", cfg.to_dict())
            _write_losses(pre_losses, out / "pretrain_losses.csv")
            artifacts["pretrain"] = str(out / "pretrain.ckpt")

        stage = "B"
        params_b, ft_losses = _finetune(params_a.with_head(cfg.num_categories, vb._subseed(seed, 102)),
                                        scenes, labels, cfg, vb._subseed(seed, 103))
        metrics_b = _evaluate_scenes(params_b, eval_scenes, cfg.num_categories)
        if out is not None:
            vb.save_checkpoint(params_b, out / "finetune_B.ckpt", cfg.to_dict())
            _write_losses(ft_losses, out / "finetune_B_losses.csv")
            if metrics_b is not None:
                write_json(metrics_b.to_dict(), out / "metrics_B.json")

        pseudo: dict = {}
        params_e = params_b
        if cfg.stages.harvest:
            stage = "C"
            hist = [HISTOGRAM_HEADER]
            for k, (scene, lb) in enumerate(zip(scenes, labels)):
                pseudo[scene.scene_id] = _harvest_scene(params_b, scene, lb, cfg, vb._subseed(seed, 104, k),
                                                        out, hist)
            if out is not None:
                (out / "histograms.csv").write_text("\n".join(hist) + "\n", encoding="utf-8")

            stage = "D"
            start = params_a.with_head(cfg.num_categories, vb._subseed(seed, 102)) \
                if cfg.stages.restart_from_pretrain else params_b
            pl = [pseudo[sc.scene_id] for sc in scenes]
            if any(len(p) for p in pl):
                params_e, ft2 = _finetune(start, scenes, pl, cfg, vb._subseed(seed, 105))
                if out is not None:
                    _write_losses(ft2, out / "finetune_D_losses.csv")
            if out is not None:
                vb.save_checkpoint(params_e, out / "finetune_D.ckpt", cfg.to_dict())

        stage = "E"
        metrics_e = _evaluate_scenes(params_e, eval_scenes, cfg.num_categories)
        if out is not None and metrics_e is not None:
            report = {"stage_E": metrics_e.to_dict(),
                      "stage_B": metrics_b.to_dict() if metrics_b is not None else None,
                      "pseudo_labels": {k: len(v) for k, v in sorted(pseudo.items())}}
            write_json(report, out / "metrics.json")
    except PipelineError:
        raise
    except Exception as err:  # noqa: BLE001 - tag and re-raise with partial artifacts on disk
        raise PipelineError(stage, err) from err
    return PipelineResult(pseudo, metrics_e, metrics_b, params_e, params_b, artifacts, pre_losses)


def _harvest_scene(params, scene: SceneMesh, labels: SparseLabelSet, cfg: PipelineConfig, seed: int,
                   out: Path | None, hist: list[str]) -> PseudoLabelSet:
    unc = mc_dropout_uncertainty(params, scene, cfg.uncertainty.passes, cfg.uncertainty.dropout_rate, seed,
                                 cfg.uncertainty.mode)
    predicted = _predict(params, scene).predicted
    spec = None
    if cfg.harvest.strategy in ("spectrum", "joint"):
        if len(labels) == 0:
            log.info("scene %s has no labels; no spectral seeds", scene.scene_id)
            return PseudoLabelSet.empty()
        spec, _ = spectrum_distances(scene, labels.indices, cfg.spectral_config())
    report = harvest_pseudo_labels(predicted, unc, spec, cfg, labels)
    hist += histogram_rows(scene.scene_id, predicted, unc.values, None if spec is None else normalize_spectrum(spec))
    if out is not None:
        sid = scene.scene_id
        save_pseudo_labels(report.pseudo, out / f"{sid}_pseudo.csv")
        write_json({str(c): m.to_dict() for c, m in sorted(report.models.items())}, out / f"{sid}_models.json")
        write_uncertainty_csv(unc, out / f"{sid}_uncertainty.csv")
        if spec is not None:
            write_spectrum_csv(spec, out / f"{sid}_spectrum.csv")
    return report.pseudo


def _write_losses(losses, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("step,loss\n")
        for k, v in enumerate(losses):
            fh.write(f"{k},{v:.9e}\n")
