import numpy as np
import pytest

from f2p.dataset import ingest
from f2p.errors import IngestError
from f2p.imaging import write_png
from f2p.synth import sample_path, synth_corpus


def _touch(root, ident, sess, imp, kind):
    write_png(sample_path(root, ident, sess, imp, kind), np.zeros((4, 4)))


def test_ingest_synthetic_corpus(tmp_path):
    synth_corpus(tmp_path, n_ids=2, impressions=2, seed=1)
    layout = ingest(tmp_path)
    assert len(layout.pairs) == 8
    assert layout.identities == [1, 2] and layout.sessions == [1, 2]
    st = layout.stats()
    assert st["n_pairs"] == 8 and st["n_masks"] == 8
    assert st["per_subject_session"]["1/2"] == 2
    assert len(layout.select([2])) == 4
    p = layout.pairs[0]
    assert p.key == (1, 1, 1) and p.flash.name == "01_flash.png" and p.mask is not None


def test_ingest_errors(tmp_path):
    with pytest.raises(IngestError, match="does not exist"):
        ingest(tmp_path / "missing")
    with pytest.raises(IngestError, match="no subjects found"):
        ingest(tmp_path)
    _touch(tmp_path, 1, 1, 1, "flash")
    _touch(tmp_path, 1, 1, 1, "nonflash")
    _touch(tmp_path, 2, 1, 3, "flash")
    with pytest.raises(IngestError) as err:
        ingest(tmp_path)
    assert "03_flash.png" in str(err.value) and len(err.value.files) == 1


def test_ingest_duplicate_key(tmp_path):
    _touch(tmp_path, 1, 1, 1, "flash")
    _touch(tmp_path, 1, 1, 1, "nonflash")
    # "001" and "1" parse to the same identity
    write_png(tmp_path / "subjects" / "1" / "session1" / "01_flash.png", np.zeros((4, 4)))
    with pytest.raises(IngestError, match="duplicate"):
        ingest(tmp_path)


def test_ingest_custom_pattern(tmp_path):
    for name in ("7_2_3_F.png", "7_2_3_NF.png"):
        write_png(tmp_path / name, np.zeros((4, 4)))
    pat = r"(?P<id>\d+)_(?P<session>\d+)_(?P<impression>\d+)_(?P<kind>F|NF)\.png"
    with pytest.raises(IngestError, match="unknown capture kind"):
        ingest(tmp_path, pattern=pat)
