import numpy as np
import pytest
import torch
from PIL import Image

from ssltr.dataset import Corpus, LineImage, subset
from ssltr.labelgen import AEConfig, AutoencoderModel, LabelManifest, LabelMisalignment
from ssltr.types import LabelMethod
from ssltr.viz import (
    NotEnoughFrames,
    Region,
    TrigramIndex,
    TrigramOutOfBounds,
    brute_force_trigram_scan,
    dump_neighbors,
    dump_reconstructions,
    dump_trigram_matches,
    nearest_neighbor_patches,
    query_trigram,
    stack_rows,
    trigram_matches,
)

from tests.helpers import random_line, tiny_model


def blank_corpus(frame_counts):
    lines = [
        (LineImage(f"line{i:02d}", np.ones((40, 8 * n), np.float32)), None)
        for i, n in enumerate(frame_counts)
    ]
    return Corpus.from_lines("blank", lines)


def random_manifest(corpus, k, seed):
    rng = np.random.default_rng(seed)
    labels = {e.id: rng.integers(0, k, e.image.frames) for e in corpus}
    return LabelManifest(k, LabelMethod.FQ, labels)


def patches(images, widths):
    """Each 8-pixel column of a line, flattened, as its output."""
    b, _, h, w = images.shape
    return images.reshape(b, h, w // 8, 8).permute(0, 2, 1, 3).reshape(b, w // 8, h * 8)


# -- panels


def test_stack_rows_pads_and_separates():
    panel = stack_rows([np.zeros((40, 10), np.float32), np.zeros((40, 6), np.float32)])
    assert panel.shape == (82, 10)
    assert np.all(panel[40:42] == 0.5)
    assert np.all(panel[42:, 6:] == 1.0)
    with pytest.raises(ValueError):
        stack_rows([])


def test_region_cut_clips_to_the_line():
    image = random_line(64)
    region = Region.cut(image, 0, 1, margin=16)
    assert (region.x0, region.x1) == (0, 24)
    assert region.pixels.shape == (40, 24)
    region = Region.cut(image, 7, 8, margin=16)
    assert (region.x0, region.x1) == (40, 64)


def test_reconstruction_panels(tmp_path, cursive_corpus):
    # given: a small autoencoder and three lines
    torch.manual_seed(0)
    model = AutoencoderModel(AEConfig(latent_dim=8, width=0.125))
    lines = subset(cursive_corpus, 3, seed=0)

    # when: the panels are written twice
    first = dump_reconstructions(model, lines, tmp_path / "a")
    second = dump_reconstructions(model, lines, tmp_path / "b")

    # then: one panel per line, original above reconstruction
    assert [p.name for p in first] == [
        f"recon_{n:04d}_{line_id}.png" for n, line_id in enumerate(lines.ids)
    ]
    for path, entry in zip(first, lines):
        with Image.open(path) as im:
            assert im.size == (entry.image.width, 82)

    # and: they are byte-identical
    for a, b in zip(first, second):
        assert a.read_bytes() == b.read_bytes()


# -- nearest neighbors


def test_self_retrieval_finds_the_query_frame(tmp_path):
    # given: random lines whose outputs are their own pixel columns
    lines = [random_line(8 * n, seed=n, line_id=f"r{n}") for n in (6, 9, 12)]

    # when: the lines are searched against themselves
    panels = nearest_neighbor_patches(patches, lines, lines, n=4, seed=2)

    # then: the best match of every query is the query frame, at similarity one
    for panel in panels:
        best, score = panel.matches[0]
        assert (best.line_id, best.start) == (panel.query.line_id, panel.query.start)
        assert score == pytest.approx(1.0)
        assert len(panel.matches) == 4
        assert panel.similarities == sorted(panel.similarities, reverse=True)

    # and: one picture per query
    paths = dump_neighbors(panels, tmp_path)
    assert [p.name for p in paths] == ["neighbors_0000_r6.png", "neighbors_0001_r9.png", "neighbors_0002_r12.png"]


def test_constant_outputs_keep_search_order():
    lines = [random_line(24, seed=1, line_id="a"), random_line(32, seed=2, line_id="b")]

    def constant(images, widths):
        return torch.ones(images.shape[0], images.shape[-1] // 8, 5)

    (panel,) = nearest_neighbor_patches(constant, lines[:1], lines, n=5)
    assert panel.similarities == pytest.approx([1.0] * 5)
    assert [(r.line_id, r.start) for r, _ in panel.matches] == [
        ("a", 0), ("a", 1), ("a", 2), ("b", 0), ("b", 1)
    ]


def test_self_search_puts_the_query_first_among_ties():
    # given: outputs that are identical for every frame
    lines = [random_line(24, seed=1, line_id="a"), random_line(32, seed=2, line_id="b")]

    def constant(images, widths):
        return torch.ones(images.shape[0], images.shape[-1] // 8, 5)

    # when: the batch is searched against itself
    panels = nearest_neighbor_patches(constant, lines, lines, n=3, seed=4)

    # then: every query frame is its own best match, then search order follows
    for panel in panels:
        best, score = panel.matches[0]
        assert (best.line_id, best.start) == (panel.query.line_id, panel.query.start)
        assert score == pytest.approx(1.0)
        own = (best.line_id, best.start)
        rest = [(r.line_id, r.start) for r, _ in panel.matches[1:]]
        assert rest == [k for k in [("a", 0), ("a", 1), ("a", 2)] if k != own][:2]


def test_retrieval_needs_enough_frames():
    lines = [random_line(16)]
    with pytest.raises(NotEnoughFrames):
        nearest_neighbor_patches(patches, lines, lines, n=3)


def test_retrieval_with_a_model():
    # a real module runs too, in eval mode
    model = tiny_model(head="Linear(6)")
    model.train()
    lines = [random_line(40, seed=s, line_id=f"m{s}") for s in range(2)]
    panels = nearest_neighbor_patches(model, lines, lines, n=3)
    assert len(panels) == 2
    assert model.training


# -- label trigrams


def test_trigram_index_matches_brute_force():
    # given: 64 lines with random labels from a small alphabet
    rng = np.random.default_rng(0)
    corpus = blank_corpus(rng.integers(3, 13, 64))
    manifest = random_manifest(corpus, k=4, seed=1)

    # when: the index is built
    index = TrigramIndex(manifest, corpus)

    # then: every trigram lookup agrees with a full scan
    for a in range(4):
        for b in range(4):
            for c in range(4):
                trigram = (a, b, c)
                assert index.lookup(trigram) == brute_force_trigram_scan(manifest, corpus, trigram)
    assert len(index) <= 64


def test_identical_lines_all_match(tmp_path):
    # given: five lines carrying the same labels
    corpus = blank_corpus([6] * 5)
    labels = np.array([0, 1, 2, 3, 0, 1])
    manifest = LabelManifest(4, LabelMethod.VQVAE, {line_id: labels for line_id in corpus.ids})

    # when: the trigram at position 1 of the third line is queried
    regions = trigram_matches(manifest, corpus, "line02", 1)

    # then: every line contributes its position 1, the query included
    assert [(r.line_id, r.start, r.stop) for r in regions] == [
        (line_id, 1, 4) for line_id in corpus.ids
    ]
    assert all((r.x0, r.x1) == (0, 48) for r in regions)

    # and: (0, 1, 2) occurs once per line, at position 0 only
    assert [r.start for r in trigram_matches(manifest, corpus, "line00", 0)] == [0] * 5
    assert len(trigram_matches(manifest, corpus, "line00", 0, max_hits=2)) == 2
    assert dump_trigram_matches(regions, tmp_path / "t.png").is_file()


def test_trigram_query_errors():
    corpus = blank_corpus([4, 5])
    manifest = random_manifest(corpus, k=3, seed=0)
    assert query_trigram(manifest, "line00", 1) == tuple(int(v) for v in manifest["line00"][1:4])
    with pytest.raises(TrigramOutOfBounds):
        query_trigram(manifest, "line00", 2)
    with pytest.raises(TrigramOutOfBounds):
        trigram_matches(manifest, corpus, "line01", -1)
    with pytest.raises(KeyError):
        trigram_matches(manifest, corpus, "nope", 0)
    with pytest.raises(ValueError):
        dump_trigram_matches([], "unused.png")


def test_trigram_labels_must_align_with_frames():
    corpus = blank_corpus([4, 5])
    manifest = LabelManifest(3, LabelMethod.FQ, {"line00": np.zeros(4, int), "line01": np.zeros(4, int)})
    with pytest.raises(LabelMisalignment):
        trigram_matches(manifest, corpus, "line00", 0)
