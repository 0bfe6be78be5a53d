import itertools
import math

import numpy as np
import pytest
import torch

from ssltr.augment import AugmentationSet
from ssltr.backbone import checkpoint_digest, save_checkpoint
from ssltr.dataset import Charset, Corpus, LineImage, subset
from ssltr.ocr import (
    CharsetMismatch,
    EmptyReference,
    InfeasibleAlignment,
    OcrBatchBuilder,
    best_path,
    cer,
    ctc_batch_loss,
    ctc_loss,
    edit_operations,
    evaluate,
    greedy_decode,
    predict,
    prepare_ocr_model,
    required_frames,
    train_ocr,
)
from ssltr.schedule import Schedule
from ssltr.training import MetricsStream
from ssltr.types import BackboneKind

from tests.helpers import slow, tiny_model

ABC = Charset(("a", "b"))


def collapse(path, blank):
    out, prev = [], None
    for label in path:
        if label != prev and label != blank:
            out.append(label)
        prev = label
    return out


def brute_force_ctc(logits, target, blank):
    """-log of the summed probability of every path that collapses to ``target``."""
    log_probs = torch.log_softmax(logits.double(), dim=-1).numpy()
    frames, classes = log_probs.shape
    total = 0.0
    for path in itertools.product(range(classes), repeat=frames):
        if collapse(path, blank) == list(target):
            total += math.exp(sum(log_probs[t, c] for t, c in enumerate(path)))
    return -math.log(total)


# -- loss


def test_ctc_known_values():
    # given: uniform logits over one character and the blank
    charset = Charset(("a",))

    # then: one frame for "a" has probability 1/2
    assert float(ctc_loss(torch.zeros(1, 2), "a", charset)) == pytest.approx(math.log(2), abs=1e-4)

    # and: two frames have three paths out of four
    assert float(ctc_loss(torch.zeros(2, 2), "a", charset)) == pytest.approx(
        -math.log(0.75), abs=1e-4
    )


@pytest.mark.parametrize("seed", range(100))
def test_ctc_matches_path_enumeration(seed):
    # given: random logits over two characters and the blank
    rng = np.random.default_rng(seed)
    frames = int(rng.integers(2, 7))
    target = [int(v) for v in rng.integers(0, 2, int(rng.integers(1, 3)))]
    if required_frames(target) > frames:
        target = target[:1]
    logits = torch.from_numpy(rng.normal(size=(frames, 3)))

    # then: the CTC loss equals the sum over all alignments
    loss = ctc_loss(logits, target, ABC)
    assert float(loss) == pytest.approx(brute_force_ctc(logits, target, ABC.blank_index), rel=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_ctc_gradient_check(seed):
    torch.manual_seed(seed)
    logits = torch.randn(5, 3, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda x: ctc_loss(x, [0, 0], ABC), (logits,))


def test_ctc_infeasible_alignment():
    # "aa" needs a blank between the repeats: three frames
    with pytest.raises(InfeasibleAlignment):
        ctc_loss(torch.zeros(2, 3), "aa", ABC)
    ctc_loss(torch.zeros(3, 3), "aa", ABC)


def test_ctc_batch_is_mean_of_lines():
    torch.manual_seed(1)
    logits = torch.randn(2, 6, 3, dtype=torch.float64)
    targets = [(0, 1), (1,)]
    frames = torch.tensor([6, 4])
    batch = ctc_batch_loss(logits, frames, targets, ABC.blank_index)
    single = [ctc_loss(logits[0, :6], targets[0], ABC), ctc_loss(logits[1, :4], targets[1], ABC)]
    assert float(batch) == pytest.approx(float(sum(single)) / 2, rel=1e-9)


# -- decoding


def one_hot(path, classes):
    logits = torch.full((len(path), classes), -5.0)
    logits[torch.arange(len(path)), torch.tensor(path)] = 5.0
    return logits


def test_greedy_decode_examples():
    charset = Charset(("a", "b", "c"))
    blank = charset.blank_index
    cases = [
        ([0, 0, blank, 0, 1], "aab"),
        ([blank, blank], ""),
        ([2, 2, 2], "c"),
        ([0, blank, blank, 0], "aa"),
        ([1, 0, 1, blank], "bab"),
    ]
    for path, text in cases:
        assert greedy_decode(one_hot(path, charset.num_classes), charset) == text


def test_greedy_decode_inverts_ideal_alignment():
    # every text over a small alphabet, emitted with blanks between characters
    charset = Charset(tuple("abcde"))
    blank = charset.blank_index
    for length in range(5):
        for chars in itertools.product(range(5), repeat=length):
            path = [blank]
            for c in chars:
                path += [c, blank]
            assert best_path(one_hot(path, 6), blank) == list(chars)


@slow
def test_greedy_decode_inverts_ideal_alignment_exhaustively():
    charset = Charset(tuple("abcde"))
    blank = charset.blank_index
    for length in range(5, 11):
        for chars in itertools.product(range(5), repeat=length):
            path = np.full(2 * length + 1, blank)
            path[1::2] = chars
            assert collapse(path.tolist(), blank) == list(chars)
            assert best_path(one_hot(path.tolist(), 6), blank) == list(chars)


def test_greedy_decode_drops_padding_classes():
    charset = Charset(("a",), capacity=3)
    assert greedy_decode(one_hot([0, 2, 1, 0], charset.num_classes), charset) == "aa"


# -- character error rate


def levenshtein(a, b):
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        row = [i]
        for j, cb in enumerate(b, 1):
            row.append(min(prev[j] + 1, row[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = row
    return prev[-1]


def test_cer_matches_reference_distance():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        hyp = "".join(rng.choice(list("abc"), int(rng.integers(0, 9))))
        ref = "".join(rng.choice(list("abc"), int(rng.integers(1, 9))))
        counts = edit_operations(hyp, ref)
        assert counts.distance == levenshtein(hyp, ref)
        assert counts.substitutions + counts.insertions + counts.deletions == counts.distance
        assert len(ref) - counts.deletions + counts.insertions == len(hyp)
        assert cer(hyp, ref) == counts.distance / len(ref)


def test_cer_edges():
    assert cer("abc", "abc") == 0.0
    assert cer("abcdef", "abc") == 1.0
    with pytest.raises(EmptyReference):
        cer("abc", "")


# -- evaluation


class Oracle(torch.nn.Module):
    """Emits the ideal alignment of each line's text, looked up by line width."""

    def __init__(self, corpus: Corpus, wrong: bool = False):
        super().__init__()
        self.charset = corpus.charset
        self.paths = {}
        for entry in corpus:
            blank = self.charset.blank_index
            indices = list(entry.transcription.indices)
            if wrong:
                indices = [(i + 1) % len(self.charset) for i in indices]
            path = [blank]
            for i in indices:
                path += [i, blank]
            path += [blank] * (entry.image.frames - len(path))
            self.paths[entry.image.width] = path

    def forward(self, images, widths):
        length = images.shape[-1] // 8
        out = torch.full((len(widths), length, self.charset.num_classes), -5.0)
        for row, width in enumerate(widths.tolist()):
            path = self.paths[width]
            out[row, torch.arange(len(path)), torch.tensor(path)] = 5.0
        return out


def oracle_corpus():
    texts = ["aa", "bb", "cc", "a"]
    lines = [
        (LineImage(f"l{i}", np.ones((40, 8 * (8 + i)), np.float32)), text)
        for i, text in enumerate(texts)
    ]
    return Corpus.from_lines("oracle", lines)


def test_evaluate_perfect_and_wrong_models():
    corpus = oracle_corpus()

    # a model emitting the ideal alignment scores zero
    perfect = evaluate(Oracle(corpus), corpus, batch_size=2)
    assert perfect.cer == 0.0
    assert [text for _, text in perfect.predictions] == [e.text for e in corpus]

    # substituting every character scores one, all substitutions
    wrong = evaluate(Oracle(corpus, wrong=True), corpus)
    assert wrong.cer == 1.0
    assert wrong.substitutions == sum(len(e.text) for e in corpus)
    assert wrong.insertions == wrong.deletions == 0


def test_evaluate_blank_model_deletes_everything():
    corpus = oracle_corpus()
    model = tiny_model(head="Linear(4)")
    with torch.no_grad():
        model.head.weight.zero_()
        model.head.bias.copy_(torch.tensor([0.0, 0.0, 0.0, 10.0]))
    report = evaluate(model, corpus)
    assert report.cer == 1.0
    assert report.deletions == sum(len(e.text) for e in corpus)
    assert predict(model, corpus) == ["", "", "", ""]


def test_report_files(tmp_path):
    corpus = oracle_corpus()
    report = evaluate(Oracle(corpus), corpus)
    lines = report.write_predictions(tmp_path / "p.tsv").read_text(encoding="utf8").splitlines()
    assert lines[0] == "l0\taa"
    assert '"cer": 0.0' in report.write_json(tmp_path / "r.json").read_text(encoding="utf8")
    assert "CER" in report.format_table()


def test_evaluate_needs_transcriptions():
    corpus = Corpus.from_lines("u", [(LineImage("u", np.ones((40, 8), np.float32)), None)])
    with pytest.raises(ValueError):
        evaluate(tiny_model(), corpus)


# -- training


def test_ocr_batches_stay_feasible(printed_corpus):
    builder = OcrBatchBuilder(printed_corpus, AugmentationSet.all(), seed=0)
    for iteration in range(5):
        batch = builder(iteration, 4)
        frames = -(-batch["widths"] // 8)
        for target, available in zip(batch["targets"], frames):
            assert required_frames(target) <= available


def test_prepare_keeps_matching_head(tmp_path, printed_corpus):
    charset = printed_corpus.charset
    model = tiny_model(head=f"Linear({charset.num_classes})")
    path = save_checkpoint(tmp_path / "m.pt", model, {"charset": list(charset.symbols)})
    kept = prepare_ocr_model(path, charset, keep_head=True)
    torch.testing.assert_close(kept.head.weight, model.head.weight)

    other = Charset(charset.symbols[:-1])
    with pytest.raises(CharsetMismatch):
        prepare_ocr_model(path, other, keep_head=True)
    assert prepare_ocr_model(path, other).output_size == other.num_classes


def ctc_on_corpus(model, corpus):
    model.eval()
    with torch.no_grad():
        total = 0.0
        for entry in corpus:
            logits = model(torch.from_numpy(entry.image.pixels)[None, None])[0]
            total += float(ctc_loss(logits, entry.transcription, corpus.charset))
    return total / len(corpus)


def test_train_ocr_reduces_loss_and_leaves_checkpoint(tmp_path, printed_corpus):
    # given: a saved starting point with an unrelated head
    corpus = subset(printed_corpus, 8, seed=0)
    start = tiny_model(BackboneKind.VIT, head="Linear(5)")
    path = save_checkpoint(tmp_path / "start.pt", start)
    digest = checkpoint_digest(path)
    before = ctc_on_corpus(prepare_ocr_model(path, corpus.charset, seed=0), corpus)

    # when: OCR is trained from the checkpoint without validation
    result = train_ocr(
        path,
        corpus,
        Schedule.uniform(60, lr=2e-3, batch_size=4),
        augmentation=AugmentationSet.none(),
        seed=0,
        progress=False,
    )

    # then: the training loss went down
    assert ctc_on_corpus(result.model, corpus) < before
    assert result.best_cer is None

    # and: the checkpoint was only read
    assert checkpoint_digest(path) == digest


def test_train_ocr_writes_a_record_every_log_every_iterations(printed_corpus):
    corpus = subset(printed_corpus, 4, seed=0)
    metrics = MetricsStream()
    train_ocr(
        tiny_model(head="Linear(5)"),
        corpus,
        Schedule.uniform(10, lr=1e-3, batch_size=2),
        augmentation=AugmentationSet.none(),
        metrics=metrics,
        log_every=4,
        progress=False,
    )
    # iterations 0, 4 and 8, then the last one
    assert [r["iteration"] for r in metrics.records] == [0, 4, 8, 9]


def test_train_ocr_tracks_best_validation(tmp_path, printed_corpus):
    # given: a short run with a validation corpus
    corpus = subset(printed_corpus, 8, seed=0)
    path = save_checkpoint(tmp_path / "start.pt", tiny_model(head="Linear(5)"))
    metrics = MetricsStream()

    # when: OCR is trained with checkpoints enabled
    result = train_ocr(
        path,
        corpus,
        Schedule.uniform(10, lr=2e-3, batch_size=4),
        augmentation=AugmentationSet.none(),
        seed=0,
        validation=subset(printed_corpus, 2, seed=1),
        metrics=metrics,
        checkpoint_dir=tmp_path / "out",
        progress=False,
    )

    # then: a best CER was kept and saved
    assert result.best_cer is not None
    assert (tmp_path / "out" / "ocr_best.pt").is_file()
    assert (tmp_path / "out" / "ocr_stage1.pt").is_file()
    assert sum("val_cer" in r for r in metrics.records) == 10


def test_train_ocr_rejects_unknown_characters(printed_corpus):
    with pytest.raises(CharsetMismatch):
        train_ocr(
            tiny_model(),
            printed_corpus,
            Schedule.uniform(1, lr=1e-3, batch_size=1),
            charset=Charset(("a",)),
            progress=False,
        )
