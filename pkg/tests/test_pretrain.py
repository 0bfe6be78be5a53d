import math

import numpy as np
import pytest
import torch

from ssltr.augment import AugmentationSet
from ssltr.backbone import HeadSpec, LineModel
from ssltr.dataset import Corpus, LineImage, synth_corpus
from ssltr.errors import EmptyInput
from ssltr.labelgen import LabelManifest, LabelMisalignment
from ssltr.pretrain import (
    EmptyOverlap,
    JointConfig,
    MaskedBatchBuilder,
    ViewPairBatchBuilder,
    ZeroNormEmbedding,
    collapse_probe,
    default_crop_width,
    masked_cross_entropy,
    masked_evaluate,
    mask_slices,
    ntxent_loss,
    topk_error,
    train_joint,
    train_masked,
    vicreg_loss,
)
from ssltr.schedule import Schedule, Stage
from ssltr.training import MetricsStream
from ssltr.types import BackboneKind, Criterion

from tests.helpers import random_line, tiny_config, tiny_model


def random_labels(corpus, k, seed=0):
    rng = np.random.default_rng(seed)
    return LabelManifest(
        k, "fq", {e.id: rng.integers(0, k, e.image.frames) for e in corpus}
    )


# -- masking


def test_mask_slices_replaces_whole_frames():
    # given: a blank line of 50 frames
    image = LineImage("blank", np.ones((40, 400), np.float32))

    # when: slices are masked with probability 0.3
    masked, spec = mask_slices(image, p=0.3, seed=4)

    # then: exactly the reported frames changed
    changed = [
        i for i in range(50) if not np.all(masked.pixels[:, 8 * i : 8 * i + 8] == 1.0)
    ]
    assert changed == spec.masked_frames.tolist()
    assert 0 < spec.count < 50

    # and: masking is pure in its seed
    again, _ = mask_slices(image, p=0.3, seed=4)
    np.testing.assert_array_equal(again.pixels, masked.pixels)


def test_mask_rate_is_close_to_probability():
    image = LineImage("blank", np.ones((40, 8 * 4000), np.float32))
    _, spec = mask_slices(image, p=0.2, seed=0)
    assert spec.count / 4000 == pytest.approx(0.2, abs=0.03)


def test_mask_extremes():
    image = random_line(64)
    _, none = mask_slices(image, p=0.0)
    _, every = mask_slices(image, p=1.0)
    assert none.count == 0
    assert every.count == 8
    with pytest.raises(ValueError):
        mask_slices(image, p=1.5)


def test_masked_batch_has_labels_and_mask(printed_corpus):
    labels = random_labels(printed_corpus, 7)
    builder = MaskedBatchBuilder(printed_corpus, labels, p=0.5, seed=1)
    batch = builder(0, 3)
    b, length = batch["labels"].shape
    assert b == 3
    assert batch["images"].shape == (3, 1, 40, 8 * length)
    # masked frames always carry a real label
    assert (batch["labels"][batch["mask"]] >= 0).all()
    # the batch is pure in (seed, iteration)
    np.testing.assert_array_equal(builder(0, 3)["images"], batch["images"])


def test_masked_batch_rejects_misaligned_labels(printed_corpus):
    labels = random_labels(printed_corpus, 7)
    labels.labels[printed_corpus[0].id] = np.zeros(1, np.int64)
    builder = MaskedBatchBuilder(printed_corpus.take([0]), labels)
    with pytest.raises(LabelMisalignment):
        builder(0, 1)


# -- masked label prediction


def test_topk_error_matches_sort():
    # given: random logits with labels
    rng = np.random.default_rng(0)
    logits = torch.from_numpy(rng.normal(size=(1000, 20)))
    labels = torch.from_numpy(rng.integers(0, 20, 1000))

    # when: top-k errors are computed
    report = topk_error(logits, labels)

    # then: they match ranks from a full stable sort
    order = np.argsort(-logits.numpy(), axis=1, kind="stable")
    ranks = np.array([np.flatnonzero(order[i] == labels[i].item())[0] for i in range(1000)])
    for k in (1, 3, 10):
        assert report.errors[k] == pytest.approx(np.mean(ranks >= k))
    assert report.top1 >= report.top3 >= report.top10


def test_topk_error_needs_masked_frames():
    with pytest.raises(EmptyInput):
        topk_error(torch.zeros(0, 5), torch.zeros(0, dtype=torch.long))


def test_masked_loss_ignores_unmasked_frames():
    # given: logits, labels and a mask over some frames
    torch.manual_seed(0)
    logits = torch.randn(2, 6, 5)
    labels = torch.randint(0, 5, (2, 6))
    mask = torch.zeros(2, 6, dtype=torch.bool)
    mask[0, 1] = mask[1, 4] = True

    # when: logits of unmasked frames are changed
    changed = logits.clone()
    changed[~mask] = torch.randn(int((~mask).sum()), 5) * 100

    # then: the loss is unchanged
    torch.testing.assert_close(
        masked_cross_entropy(logits, labels, mask), masked_cross_entropy(changed, labels, mask)
    )

    # and: an empty mask is a no-op
    assert masked_cross_entropy(logits, labels, torch.zeros_like(mask)) is None


def test_train_masked_runs_every_iteration(tmp_path, printed_corpus):
    # given: random labels and a tiny model with a mismatched head
    labels = random_labels(printed_corpus, 6)
    model = tiny_model(BackboneKind.VIT, head="Linear(3)")
    schedule = Schedule((Stage(0, 3, 1e-3, 2), Stage(3, 6, 5e-4, 2)))
    metrics = MetricsStream()

    # when: masked pre-training runs with a held-out part
    model, log = train_masked(
        model,
        printed_corpus.take(range(8)),
        labels,
        schedule,
        p=0.5,
        heldout=printed_corpus.take(range(8, 12), "heldout"),
        metrics=metrics,
        checkpoint_dir=tmp_path,
        progress=False,
    )

    # then: the head was resized to the label count
    assert model.output_size == 6

    # and: every iteration was accounted for
    assert log.iterations == 6

    # and: held-out top-k errors were recorded
    assert "heldout_top1_error" in log.evaluations[-1]

    # and: one checkpoint per stage was written
    assert (tmp_path / "masked_stage1.pt").is_file()
    assert (tmp_path / "masked_stage2.pt").is_file()


def test_masked_evaluate_is_deterministic(printed_corpus):
    labels = random_labels(printed_corpus, 4)
    model = tiny_model(head="Linear(4)")
    a = masked_evaluate(model, printed_corpus, labels, p=0.5, seed=2)
    b = masked_evaluate(model, printed_corpus, labels, p=0.5, seed=2)
    assert a.errors == b.errors
    assert a.count > 0


# -- joint embedding


def vicreg_reference(za, zb, lam=25.0, mu=25.0, nu=1.0, gamma=1.0, eps=1e-4):
    n, d = za.shape
    invariance = sum((za[i, j] - zb[i, j]) ** 2 for i in range(n) for j in range(d)) / (n * d)

    def variance(z):
        total = 0.0
        for j in range(d):
            mean = sum(z[i, j] for i in range(n)) / n
            var = sum((z[i, j] - mean) ** 2 for i in range(n)) / (n - 1)
            total += max(0.0, gamma - math.sqrt(var + eps))
        return total / d

    def covariance(z):
        means = [sum(z[i, j] for i in range(n)) / n for j in range(d)]
        total = 0.0
        for a in range(d):
            for b in range(d):
                if a != b:
                    c = sum((z[i, a] - means[a]) * (z[i, b] - means[b]) for i in range(n)) / (n - 1)
                    total += c * c
        return total / d

    return (
        lam * invariance
        + mu * (variance(za) + variance(zb))
        + nu * (covariance(za) + covariance(zb))
    )


def ntxent_reference(za, zb, pairs, t):
    def unit(v):
        return v / np.linalg.norm(v)

    a = [unit(v) for v in za]
    b = [unit(v) for v in zb]

    def term(x, y, i, j):
        scores = [float(x[i] @ y[m]) / t for m in range(len(y))]
        top = max(scores)
        log_sum = top + math.log(sum(math.exp(s - top) for s in scores))
        return log_sum - scores[j]

    forward = sum(term(a, b, i, j) for i, j in pairs) / len(pairs)
    backward = sum(term(b, a, j, i) for i, j in pairs) / len(pairs)
    return (forward + backward) / 2


@pytest.mark.parametrize("seed", range(50))
def test_vicreg_matches_scalar_reference(seed):
    rng = np.random.default_rng(seed)
    n, d = int(rng.integers(2, 9)), int(rng.integers(1, 6))
    za = rng.normal(scale=rng.uniform(0.1, 3.0), size=(n, d))
    zb = za + rng.normal(scale=0.5, size=(n, d))
    terms = vicreg_loss(torch.from_numpy(za), torch.from_numpy(zb))
    assert float(terms.total) == pytest.approx(vicreg_reference(za, zb), rel=1e-9, abs=1e-9)


def test_vicreg_collapse_costs_variance():
    z = torch.ones(16, 4, dtype=torch.float64)
    terms = vicreg_loss(z, z)
    assert float(terms.invariance) == 0.0
    assert float(terms.covariance) == 0.0
    # both branches pay gamma - sqrt(eps) per dimension
    assert float(terms.variance) == pytest.approx(2 * (1.0 - 1e-2))


def test_vicreg_errors():
    with pytest.raises(ValueError):
        vicreg_loss(torch.zeros(1, 3), torch.zeros(1, 3))
    with pytest.raises(ValueError):
        vicreg_loss(torch.zeros(4, 3), torch.zeros(4, 2))


@pytest.mark.parametrize("seed", range(50))
def test_ntxent_matches_scalar_reference(seed):
    rng = np.random.default_rng(seed)
    la, lb = int(rng.integers(2, 8)), int(rng.integers(2, 8))
    za, zb = rng.normal(size=(la, 5)), rng.normal(size=(lb, 5))
    shift = int(rng.integers(-(min(la, lb) - 1), min(la, lb)))
    pairs = [(i, i - shift) for i in range(la) if 0 <= i - shift < lb]
    overlap = ([i for i, _ in pairs], [j for _, j in pairs])
    t = float(rng.uniform(0.05, 1.0))
    loss = ntxent_loss(torch.from_numpy(za), torch.from_numpy(zb), overlap, t)
    assert float(loss) == pytest.approx(ntxent_reference(za, zb, pairs, t), rel=1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_ntxent_ignores_a_shared_rotation(seed):
    # given: embeddings of both views and a random orthogonal matrix
    rng = np.random.default_rng(seed)
    za, zb = rng.normal(size=(7, 6)), rng.normal(size=(7, 6))
    rotation, _ = np.linalg.qr(rng.normal(size=(6, 6)))
    overlap = ([2, 3, 4, 5, 6], [0, 1, 2, 3, 4])

    # when: the loss is computed before and after rotating both
    before = ntxent_loss(torch.from_numpy(za), torch.from_numpy(zb), overlap, 0.2)
    after = ntxent_loss(
        torch.from_numpy(za @ rotation), torch.from_numpy(zb @ rotation), overlap, 0.2
    )

    # then: cosine similarities and so the loss are unchanged
    assert float(after) == pytest.approx(float(before), rel=1e-9)


@pytest.mark.parametrize("seed", range(20))
def test_losses_pass_gradient_check(seed):
    torch.manual_seed(seed)
    za = torch.randn(6, 3, dtype=torch.float64, requires_grad=True)
    zb = torch.randn(6, 3, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda a, b: vicreg_loss(a, b).total, (za, zb))
    overlap = ([1, 2, 3], [0, 1, 2])
    assert torch.autograd.gradcheck(lambda a, b: ntxent_loss(a, b, overlap, 0.5), (za, zb))


def test_ntxent_errors():
    z = torch.randn(3, 4)
    with pytest.raises(EmptyOverlap):
        ntxent_loss(z, z, ([], []))
    with pytest.raises(ZeroNormEmbedding):
        ntxent_loss(torch.zeros(3, 4), z, ([0], [0]))
    with pytest.raises(ValueError):
        ntxent_loss(z, z, ([0], [0]), temperature=0.0)


def test_crop_width_defaults_and_doubling():
    assert default_crop_width("printed") == 512
    assert default_crop_width("cursive") == 256
    config = JointConfig(crop_width=64, crop_width_doubling_step=10)
    assert [config.crop_width_at(i) for i in (0, 9, 10, 50)] == [64, 64, 128, 128]
    assert JointConfig(crop_width=64, crop_width_doubling_step=None).crop_width_at(10**9) == 64
    with pytest.raises(ValueError):
        JointConfig(crop_width=60)


def test_view_pair_batches(printed_corpus):
    builder = ViewPairBatchBuilder(
        printed_corpus, JointConfig(crop_width=64), AugmentationSet.visual(), seed=3
    )
    batch = builder(0, 4)
    assert batch["views_a"].shape == batch["views_b"].shape == (4, 1, 40, 64)
    for (idx_a, idx_b), shift in zip(batch["overlap"], batch["shift"]):
        assert len(idx_a) == len(idx_b) >= 1
        assert np.all(idx_a - idx_b == shift)


class Echo(torch.nn.Module):
    """Ignores pixel content: every frame gets the same position-only feature."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        self.anchor = torch.nn.Parameter(torch.zeros(1))

    def backbone(self, images, widths=None):
        frames = images.shape[-1] // 8
        pos = torch.arange(frames, dtype=torch.float32)[None, :, None]
        return (pos + 1.0).expand(images.shape[0], frames, 4) + 0 * self.anchor, None


def test_collapse_probe_scores_position_echo_at_one():
    lines = [random_line(64, seed=s) for s in range(4)]
    assert collapse_probe(Echo(tiny_config()), lines) == pytest.approx(1.0)


def test_collapse_probe_on_random_model_is_below_one():
    lines = [random_line(64, seed=s) for s in range(4)]
    assert collapse_probe(tiny_model(), lines) < 0.999


def test_collapse_probe_needs_distinct_lines():
    line = random_line(64)
    with pytest.raises(ValueError):
        collapse_probe(tiny_model(), [line])
    with pytest.raises(ValueError):
        collapse_probe(tiny_model(), [line, LineImage("copy", line.pixels)])


@pytest.mark.parametrize("criterion", list(Criterion))
def test_train_joint_runs(tmp_path, printed_corpus, criterion):
    # given: a tiny model and a short schedule with an MLP head
    model = tiny_model()
    schedule = Schedule.uniform(4, lr=1e-4, batch_size=2, head=HeadSpec.parse("MLP(2, 12)"))
    config = JointConfig(criterion=criterion, crop_width=48, crop_width_doubling_step=2)

    # when: joint-embedding training runs with a collapse probe
    model, log = train_joint(
        model,
        printed_corpus.take(range(8)),
        schedule,
        config,
        probe=printed_corpus.take(range(8, 12)).images,
        checkpoint_dir=tmp_path,
        progress=False,
    )

    # then: the schedule head was installed
    assert model.output_size == 12

    # and: all iterations were training steps with finite losses
    assert log.steps == 4
    assert math.isfinite(log.last["loss"])
    assert 0.0 < log.evaluations[-1]["collapse"] <= 1.0 + 1e-6
    assert (tmp_path / f"{criterion.value}_stage1.pt").is_file()


def test_view_pair_builder_needs_wide_lines():
    corpus = Corpus.from_lines("narrow", [(LineImage("n", np.ones((40, 12), np.float32)), None)])
    with pytest.raises(ValueError):
        ViewPairBatchBuilder(corpus)


def test_vggt_joint_step_runs(printed_corpus):
    model = LineModel(tiny_config(BackboneKind.VGGT))
    schedule = Schedule.uniform(2, lr=1e-4, batch_size=2, head=HeadSpec.linear(6))
    corpus = synth_corpus("v", "printed", 3, seed=5)
    _, log = train_joint(
        model, corpus, schedule, JointConfig(Criterion.VICREG, crop_width=32), progress=False
    )
    assert log.steps == 2
