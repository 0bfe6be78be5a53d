import numpy as np
import pytest

from ssltr.dataset import (
    Charset,
    Corpus,
    DuplicateLineId,
    LineImage,
    ManifestError,
    SubsetTooLarge,
    UnknownCharacter,
    UnknownStyle,
    UnsupportedCharacter,
    ZeroAreaImage,
    batches_by_width,
    load_manifest,
    normalize_height,
    render_synthetic_line,
    split,
    subset,
    synth_corpus,
    write_manifest,
)
from ssltr.types import Style


def test_charset_blank_is_last_class():
    # given: a charset with three symbols and no reserved capacity
    charset = Charset(("a", "b", "c"))

    # then: the blank follows the symbols
    assert charset.num_classes == 4
    assert charset.blank_index == 3

    # and: with reserved capacity the blank moves behind the padding classes
    padded = charset.with_capacity(10)
    assert padded.num_classes == 11
    assert padded.blank_index == 10
    assert len(padded) == 3


def test_charset_rejects_unknown_characters():
    charset = Charset(("a", "b"))
    with pytest.raises(UnknownCharacter):
        charset.encode("abc")
    with pytest.raises(UnknownCharacter):
        charset.decode([2])


def test_render_is_deterministic_and_normalized():
    # given: the same text, style and seed twice
    a = render_synthetic_line("Hello world", Style.PRINTED, seed=3)
    b = render_synthetic_line("Hello world", Style.PRINTED, seed=3)

    # then: the rasters are identical
    np.testing.assert_array_equal(a.pixels, b.pixels)

    # and: the line is normalized
    assert a.is_normalized()

    # and: another seed changes the noise
    c = render_synthetic_line("Hello world", Style.PRINTED, seed=4)
    assert not np.array_equal(a.pixels, c.pixels)


@pytest.mark.parametrize("style", list(Style))
def test_render_both_styles(style):
    image = render_synthetic_line("the river court", style, seed=0)
    assert image.height == 40
    assert image.width >= 8
    # some ink was drawn
    assert float(image.pixels.min()) < 0.5


def test_render_rejects_bad_input():
    with pytest.raises(UnknownStyle):
        render_synthetic_line("abc", "gothic")
    with pytest.raises(UnsupportedCharacter):
        render_synthetic_line("aéb", Style.CURSIVE)
    with pytest.raises(ValueError):
        render_synthetic_line("", Style.PRINTED)


def test_synth_corpus_ids_and_charset():
    corpus = synth_corpus("demo", Style.PRINTED, 5, seed=7)
    assert corpus.ids == [f"demo-{i:06d}" for i in range(5)]
    assert corpus.is_annotated()
    for entry in corpus:
        assert corpus.charset.decode(entry.transcription.indices) == entry.text


def test_normalize_height_preserves_aspect_ratio():
    # given: a 20 x 50 raster
    image = LineImage("x", np.zeros((20, 50), np.float32))

    # when: it is normalized
    out = normalize_height(image)

    # then: it is 40 high and twice as wide
    assert out.pixels.shape == (40, 100)


def test_normalize_height_keeps_minimum_width():
    out = normalize_height(LineImage("x", np.zeros((400, 10), np.float32)))
    assert out.pixels.shape == (40, 8)


def test_normalize_height_rejects_zero_area():
    with pytest.raises(ZeroAreaImage):
        normalize_height(LineImage("x", np.zeros((0, 10), np.float32)))


def test_manifest_round_trip(tmp_path, printed_corpus):
    # given: a corpus written as a manifest with PNGs
    manifest = write_manifest(printed_corpus, tmp_path / "corpus")

    # when: it is loaded back with several workers
    loaded = load_manifest(manifest, name="printed", workers=3)

    # then: ids and transcriptions survive in order
    assert loaded.ids == printed_corpus.ids
    assert [e.text for e in loaded] == [e.text for e in printed_corpus]

    # and: pixels differ by 8-bit quantization only
    for a, b in zip(loaded.images, printed_corpus.images):
        assert a.pixels.shape == b.pixels.shape
        assert np.abs(a.pixels - b.pixels).max() <= 0.5 / 255 + 1e-6


def test_manifest_without_transcriptions(tmp_path):
    # given: an unlabeled corpus
    lines = [(LineImage(f"u{i}", np.ones((40, 16 + i), np.float32)), None) for i in range(3)]
    corpus = Corpus.from_lines("u", lines)

    # when: it goes through a manifest
    loaded = load_manifest(write_manifest(corpus, tmp_path))

    # then: no line is annotated
    assert not loaded.is_annotated()
    assert [e.text for e in loaded] == [None, None, None]


def test_manifest_errors(tmp_path):
    (tmp_path / "a.png").write_bytes(b"")
    manifest = tmp_path / "manifest.tsv"

    # a record with a single field is malformed
    manifest.write_text("only-an-id\n", encoding="utf8")
    with pytest.raises(ManifestError):
        load_manifest(manifest)

    # a missing image is reported with its record
    manifest.write_text("x\tmissing.png\ttext\n", encoding="utf8")
    with pytest.raises(ManifestError, match="missing"):
        load_manifest(manifest)

    # duplicate ids are rejected
    manifest.write_text("x\ta.png\nx\ta.png\n", encoding="utf8")
    with pytest.raises(DuplicateLineId):
        load_manifest(manifest)


def test_corpus_rejects_duplicate_ids():
    image = LineImage("same", np.ones((40, 8), np.float32))
    with pytest.raises(DuplicateLineId):
        Corpus.from_lines("dup", [(image, "a"), (image, "b")])


def test_subsets_are_nested_and_deterministic(printed_corpus):
    # given: two subset sizes drawn with the same seed
    small = subset(printed_corpus, 4, seed=5)
    large = subset(printed_corpus, 9, seed=5)

    # then: the smaller one is contained in the larger one
    assert set(small.ids) <= set(large.ids)

    # and: drawing again gives the same lines in corpus order
    assert subset(printed_corpus, 4, seed=5).ids == small.ids
    order = {line_id: i for i, line_id in enumerate(printed_corpus.ids)}
    assert small.ids == sorted(small.ids, key=order.get)


def test_subset_too_large(printed_corpus):
    with pytest.raises(SubsetTooLarge):
        subset(printed_corpus, len(printed_corpus) + 1)


def test_split_is_a_partition(printed_corpus):
    rest, heldout = split(printed_corpus, 3, seed=1)
    assert len(heldout) == 3
    assert len(rest) == len(printed_corpus) - 3
    assert not set(rest.ids) & set(heldout.ids)
    assert heldout.name == "printed-heldout"


def test_batches_by_width_groups_equal_frame_counts(printed_corpus):
    groups = list(batches_by_width(printed_corpus, 2))
    seen = [i for group in groups for i in group]
    assert sorted(seen) == list(range(len(printed_corpus)))
    for group in groups:
        assert 1 <= len(group) <= 2
        assert len({printed_corpus[i].image.frames for i in group}) == 1
