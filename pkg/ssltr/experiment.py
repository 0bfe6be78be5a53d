"""
End-to-end experiment runner: pre-train with the configured method, fine-tune on every
budget of annotated lines, evaluate on the test corpus and tabulate CER.

Artifacts under ``<output>/<name>/``::

    config.yaml                 resolved configuration (rerunnable)
    metrics/<stage>.jsonl       training metric streams
    checkpoints/...             stage-end and best-validation checkpoints
    labels/                     label manifests and codebooks of masked methods
    eval_<budget>.json          evaluation record per budget
    predictions_<budget>.tsv    ``id<TAB>hypothesis`` per test line
    summary.tsv, summary.txt    method x budget CER table
"""

import logging
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Tuple

from ssltr.backbone import HeadSpec, LineModel, checkpoint_digest, save_checkpoint
from ssltr.config import ExperimentConfig, write_config
from ssltr.dataset import Charset, Corpus, load_manifest, split, subset, synth_corpus
from ssltr.errors import SsltrError
from ssltr.labelgen import (
    AEConfig,
    LabelAssets,
    default_label_count,
    fit_codebook,
    generate_labels,
    save_autoencoder,
    train_autoencoder,
)
from ssltr.ocr import EvalReport, evaluate, train_ocr
from ssltr.pretrain import JointConfig, default_crop_width, train_joint, train_masked
from ssltr.schedule import Schedule, schedule_from_table
from ssltr.training import MetricsStream, select_device, set_seed
from ssltr.types import Criterion, Method, Phase, Style

log = logging.getLogger(__name__)

SUMMARY_TSV = "summary.tsv"
SUMMARY_TXT = "summary.txt"
CROP_DOUBLING_STEP = 100_000


class StageFailed(SsltrError):
    """A pipeline stage raised; artifacts written so far are left in place."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {type(cause).__name__}: {cause}")
        self.stage = stage
        self.cause = cause


@contextmanager
def stage_guard(stage: str):
    log.info("Stage %s", stage)
    try:
        yield
    except StageFailed:
        raise
    except Exception as e:
        log.error("Stage %s failed: %s", stage, e)
        raise StageFailed(stage, e) from e


def other_style(style: Style) -> Style:
    return Style.CURSIVE if Style(style) is Style.PRINTED else Style.PRINTED


@dataclass
class Corpora:
    train: Corpus
    validation: Corpus
    test: Corpus
    charset: Charset
    unlabeled: Optional[Corpus] = None
    source: Optional[Corpus] = None


def _corpus(path: Optional[str], name: str, workers: int, synth: Tuple[Style, int, int]):
    if path is not None:
        return load_manifest(path, name, workers)
    style, lines, seed = synth
    return synth_corpus(f"synth-{name}", style, lines, seed)


def load_corpora(config: ExperimentConfig) -> Corpora:
    """Manifests where configured, synthetic corpora otherwise; seeds derive from ``config.seed``."""
    data, synth, seed = config.data, config.synth, config.seed
    style = synth.style
    annotated = _corpus(data.train, "train", data.workers, (style, synth.annotated, seed + 1))
    test = _corpus(data.test, "test", data.workers, (style, synth.test, seed + 2))
    unlabeled = None
    if config.method not in (Method.SCRATCH, Method.TRANSFER):
        unlabeled = _corpus(
            data.unlabeled, "unlabeled", data.workers, (style, synth.unlabeled, seed + 3)
        )
    source = None
    if config.method in (Method.TRANSFER, Method.FQ):
        proxy = config.pretrain.proxy_style or other_style(style)
        source = _corpus(data.source, "source", data.workers, (proxy, synth.source, seed + 4))

    texts = [e.text for c in (annotated, test) for e in c if e.text is not None]
    charset = Charset.from_texts(texts, data.charset_capacity)
    pool, validation = split(annotated.with_charset(charset), data.validation, seed)
    return Corpora(pool, validation, test.with_charset(charset), charset, unlabeled, source)


class SummaryRow(NamedTuple):
    method: str
    backbone: str
    budget: int
    cer: float


@dataclass
class ExperimentResult:
    run_dir: Path
    rows: List[SummaryRow] = field(default_factory=list)
    reports: Dict[int, EvalReport] = field(default_factory=dict)
    pretrained: Optional[Path] = None


class ExperimentRunner(object):
    """Holds the per-run state shared by the pipeline stages."""

    def __init__(self, config: ExperimentConfig, progress: Optional[bool] = None):
        self.config = config
        self.run_dir = config.run_dir
        self.device = select_device(config.training.device)
        self.progress = config.training.progress if progress is None else progress
        self.style = config.synth.style

    # -- helpers

    def path(self, *parts: str) -> Path:
        path = self.run_dir.joinpath(*parts)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def directory(self, *parts: str) -> Path:
        path = self.run_dir.joinpath(*parts)
        path.mkdir(parents=True, exist_ok=True)
        return path

    def metrics(self, stage: str) -> MetricsStream:
        return MetricsStream(self.path("metrics", f"{stage}.jsonl"))

    def schedule(self, phase: Phase) -> Schedule:
        t = self.config.training
        return schedule_from_table(phase, t.scale, t.batch_scale, t.max_batch)

    def augmentation(self, schedule: Schedule):
        kind = self.config.pretrain.augmentation or schedule.augmentation
        return self.config.augmentation_for(kind)

    def new_model(self, head: HeadSpec, seed: int) -> LineModel:
        set_seed(seed)
        return LineModel(self.config.model.model_config(head))

    @property
    def k(self) -> int:
        method = self.config.method.label_method
        return self.config.pretrain.k or default_label_count(method, self.style)

    # -- pre-training

    def train_recognizer(self, corpus: Corpus, charset: Charset, stage: str) -> Path:
        """OCR from scratch; the transfer model and the FQ proxy recognizer."""
        seed = self.config.seed
        schedule = self.schedule(Phase.OCR_SCRATCH)
        model = self.new_model(HeadSpec.linear(charset.num_classes), seed)
        heldout = min(self.config.data.validation, len(corpus) // 10)
        pool, validation = split(corpus.with_charset(charset), heldout, seed)
        with self.metrics(stage) as metrics:
            result = train_ocr(
                model,
                pool,
                schedule,
                augmentation=self.config.augmentation_for(schedule.augmentation),
                charset=charset,
                seed=seed,
                validation=validation,
                metrics=metrics,
                checkpoint_dir=self.directory("checkpoints", stage),
                stage=stage,
                device=self.device,
                prefetch=self.config.training.prefetch,
                log_every=self.config.training.log_every,
                progress=self.progress,
            )
        return save_checkpoint(
            self.path("checkpoints", f"{stage}.pt"),
            result.model,
            {"charset": list(charset.symbols), "capacity": charset.capacity, "phase": stage},
        )

    def masked(self, corpora: Corpora) -> LineModel:
        method, seed, cfg = self.config.method, self.config.seed, self.config.pretrain
        unlabeled = corpora.unlabeled
        heldout_size = min(64, len(unlabeled) // 8)
        train, heldout = split(unlabeled, heldout_size, seed)
        assets = LabelAssets()

        if method is Method.FQ:
            with stage_guard("proxy_ocr"):
                source = corpora.source
                proxy_charset = Charset.from_texts(e.text for e in source if e.text)
                proxy = self.train_recognizer(source, proxy_charset, "proxy_ocr")
                assets = LabelAssets.from_files(encoder=proxy)
        else:
            with stage_guard("autoencoder"):
                quantized = method is Method.VQVAE
                ae_schedule = self.schedule(Phase.AE)
                with self.metrics("autoencoder") as metrics:
                    autoencoder = train_autoencoder(
                        train,
                        quantized,
                        self.k,
                        ae_schedule,
                        AEConfig(cfg.ae_latent_dim, cfg.ae_width, commitment=cfg.commitment),
                        seed=seed,
                        heldout=heldout,
                        metrics=metrics,
                        checkpoint_dir=self.directory("checkpoints", "autoencoder"),
                        max_width=cfg.ae_max_width,
                        augmentation=self.augmentation(ae_schedule),
                        device=self.device,
                        log_every=self.config.training.log_every,
                        progress=self.progress,
                    )
                ae_path = save_autoencoder(self.path("checkpoints", "autoencoder.pt"), autoencoder)
                assets = LabelAssets(
                    autoencoder=autoencoder, encoder_digest=checkpoint_digest(ae_path)
                )

        if method in (Method.FQ, Method.PQAE):
            with stage_guard("codebook"):
                encoder = assets.encoder if method is Method.FQ else assets.autoencoder
                assets.codebook = fit_codebook(
                    encoder,
                    unlabeled,
                    self.k,
                    seed=seed,
                    epochs=cfg.kmeans_epochs,
                    normalize=cfg.kmeans_normalize,
                    device=self.device,
                    progress=self.progress,
                )
                assets.codebook.save(self.path("labels", "codebook.npz"))

        with stage_guard("labels"):
            labels = generate_labels(
                method.label_method,
                unlabeled,
                assets,
                self.path("labels", "labels.tsv"),
                device=self.device,
                progress=self.progress,
            )

        with stage_guard("masked"):
            schedule = self.schedule(Phase.MASKED)
            model = self.new_model(HeadSpec.linear(labels.k), seed)
            with self.metrics("masked") as metrics:
                model, _ = train_masked(
                    model,
                    train,
                    labels,
                    schedule,
                    p=cfg.mask_probability,
                    seed=seed,
                    heldout=heldout,
                    metrics=metrics,
                    checkpoint_dir=self.directory("checkpoints", "masked"),
                    device=self.device,
                    prefetch=self.config.training.prefetch,
                    log_every=self.config.training.log_every,
                    progress=self.progress,
                )
        return model

    def joint(self, corpora: Corpora) -> LineModel:
        method, seed, cfg = self.config.method, self.config.seed, self.config.pretrain
        phase = Phase.VICREG if method is Method.VICREG else Phase.NTXENT
        schedule = self.schedule(phase)
        joint_config = JointConfig(
            criterion=Criterion(method.value),
            temperature=cfg.temperature,
            crop_width=cfg.crop_width or default_crop_width(self.style),
            crop_width_doubling_step=math.ceil(CROP_DOUBLING_STEP * self.config.training.scale),
            shift=cfg.shift,
        )
        probe_size = min(cfg.probe_lines, len(corpora.unlabeled) // 8)
        train, probe = split(corpora.unlabeled, probe_size, seed)
        with stage_guard(phase.value):
            model = self.new_model(schedule.head, seed)
            with self.metrics(phase.value) as metrics:
                model, _ = train_joint(
                    model,
                    train,
                    schedule,
                    joint_config,
                    seed=seed,
                    probe=probe.images if len(probe) >= 2 else None,
                    augmentation=self.augmentation(schedule),
                    metrics=metrics,
                    checkpoint_dir=self.directory("checkpoints", phase.value),
                    device=self.device,
                    prefetch=self.config.training.prefetch,
                    log_every=self.config.training.log_every,
                    progress=self.progress,
                )
        return model

    def pretrain(self, corpora: Corpora) -> Optional[Path]:
        """The checkpoint fine-tuning starts from; ``None`` for training from scratch."""
        method = self.config.method
        if method is Method.SCRATCH:
            return None
        if method is Method.TRANSFER:
            with stage_guard("transfer"):
                charset = Charset.from_texts(
                    (e.text for e in corpora.source if e.text), self.config.data.charset_capacity
                )
                return self.train_recognizer(corpora.source, charset, "transfer")
        model = self.masked(corpora) if method.is_masked else self.joint(corpora)
        return save_checkpoint(
            self.path("checkpoints", "pretrained.pt"), model, {"phase": method.value}
        )

    # -- fine-tuning

    def finetune(self, corpora: Corpora, pretrained: Optional[Path], budget: int) -> EvalReport:
        seed = self.config.seed
        stage = f"ocr_{budget}"
        with stage_guard(stage):
            lines = subset(corpora.train, budget, seed)
            if pretrained is None:
                phase = Phase.OCR_SCRATCH
                start = self.new_model(HeadSpec.linear(corpora.charset.num_classes), seed)
            else:
                phase = Phase.OCR_FINETUNE
                set_seed(seed)
                start = pretrained
            schedule = self.schedule(phase)
            with self.metrics(stage) as metrics:
                result = train_ocr(
                    start,
                    lines,
                    schedule,
                    augmentation=self.config.augmentation_for(schedule.augmentation),
                    charset=corpora.charset,
                    seed=seed,
                    validation=corpora.validation,
                    metrics=metrics,
                    checkpoint_dir=self.directory("checkpoints", stage),
                    stage=stage,
                    device=self.device,
                    prefetch=self.config.training.prefetch,
                    log_every=self.config.training.log_every,
                    progress=self.progress,
                )
            report = evaluate(
                result.model,
                corpora.test,
                corpora.charset,
                self.config.training.eval_batch_size,
                self.device,
            )
            report.write_json(self.path(f"eval_{budget}.json"))
            report.write_predictions(self.path(f"predictions_{budget}.tsv"))
        log.info("%s: test CER %.4f on %d lines", stage, report.cer, report.lines)
        return report

    def run(self) -> ExperimentResult:
        config = self.config
        self.run_dir.mkdir(parents=True, exist_ok=True)
        write_config(config, self.run_dir)
        set_seed(config.seed)
        with stage_guard("data"):
            corpora = load_corpora(config)
        log.info(
            "Corpora: %d annotated, %d validation, %d test lines; %d characters",
            len(corpora.train),
            len(corpora.validation),
            len(corpora.test),
            len(corpora.charset),
        )

        result = ExperimentResult(self.run_dir)
        result.pretrained = self.pretrain(corpora)
        for budget in config.data.budgets:
            report = self.finetune(corpora, result.pretrained, budget)
            result.reports[budget] = report
            result.rows.append(
                SummaryRow(config.method.value, config.model.backbone.value, budget, report.cer)
            )
        write_summary(result.rows, self.run_dir)
        return result


def run_experiment(config: ExperimentConfig, progress: Optional[bool] = None) -> ExperimentResult:
    return ExperimentRunner(config, progress).run()


def write_summary(rows: List[SummaryRow], run_dir: Path) -> Tuple[Path, Path]:
    run_dir = Path(run_dir)
    tsv = run_dir / SUMMARY_TSV
    with open(tsv, "w", encoding="utf8") as f:
        f.write("method\tbackbone\tbudget\tcer\n")
        for row in rows:
            f.write(f"{row.method}\t{row.backbone}\t{row.budget}\t{row.cer:.6f}\n")
    txt = run_dir / SUMMARY_TXT
    txt.write_text(format_summary(rows) + "\n", encoding="utf8")
    return tsv, txt


def read_summary(path: Path) -> List[SummaryRow]:
    rows = []
    with open(path, encoding="utf8") as f:
        next(f)
        for line in f:
            method, backbone, budget, cer = line.rstrip("\n").split("\t")
            rows.append(SummaryRow(method, backbone, int(budget), float(cer)))
    return rows


def format_summary(rows: List[SummaryRow]) -> str:
    """
    One row per method and backbone, one CER column per budget.

    >>> print(format_summary([SummaryRow("fq", "vggt", 100, 0.0234)]))
    method     backbone     100
    fq         vggt       2.34%
    """
    budgets = sorted({r.budget for r in rows})
    keys = list(dict.fromkeys((r.method, r.backbone) for r in rows))
    cells = {(r.method, r.backbone, r.budget): r.cer for r in rows}
    lines = [f"{'method':<10} {'backbone':<8}" + "".join(f"{b:>8}" for b in budgets)]
    for method, backbone in keys:
        values = ""
        for b in budgets:
            cer = cells.get((method, backbone, b))
            values += f"{'-':>8}" if cer is None else f"{100 * cer:>7.2f}%"
        lines.append(f"{method:<10} {backbone:<8}{values}")
    return "\n".join(lines)


__all__ = [
    "StageFailed",
    "stage_guard",
    "other_style",
    "Corpora",
    "load_corpora",
    "SummaryRow",
    "ExperimentResult",
    "ExperimentRunner",
    "run_experiment",
    "write_summary",
    "read_summary",
    "format_summary",
]
