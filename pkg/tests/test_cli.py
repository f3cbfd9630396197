import csv
import json
import shutil

import numpy as np
import pytest

from f2p.cli import build_parser, main, resolve_config
from f2p.evaluation import pair_scores, verification_metrics
from f2p.synth import sample_path

SMOKE = "configs/smoke.cfg"
STAGES = [
    ["synth"], ["ingest"], ["align"], ["segment"], ["diff"],
    ["train-fusion"], ["fuse"], ["train-enhancer"], ["enhance"],
    ["train-embed", "--variant", "I"], ["train-embed"], ["finetune"],
    ["embed", "--variant", "I"], ["embed"], ["embed", "--manifest", "{out}/models/f2p_finetuned.manifest"],
    ["verify"], ["verify", "--name", "f2p_finetuned"], ["quality"],
]


def run(out, *argv):
    return main([a.format(out=out) for a in argv] + ["--config", SMOKE, "--out", str(out)])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    for stage in STAGES:
        assert run(out, *stage) == 0, stage
    return out


def test_every_stage_writes_outputs_and_logs(work):
    for stage in {s[0] for s in STAGES}:
        assert (work / "logs" / f"{stage}.json").is_file(), stage
    assert len(list((work / "stages" / "enhanced").glob("*_enh.png"))) == 16
    for ckpt in ("fusion", "enhancer", "embedder", "embedder_I"):
        assert (work / "models" / f"{ckpt}.ckpt").is_file()
    assert (work / "models" / "f2p.manifest").is_file()
    assert (work / "models" / "config.resolved.txt").is_file()
    with open(work / "logs" / "finetune-grad-norms.csv") as fh:
        norms = [float(r["grad_norm"]) for r in csv.DictReader(fh)]
    assert norms and max(norms) <= 1.0 + 1e-6


def test_verify_matches_library_call(work):
    src = work / "embeddings" / "f2p"
    emb = np.load(src / "embeddings.npy")
    with open(src / "index.csv") as fh:
        index = list(csv.DictReader(fh))
    ids = np.array([int(r["identity"]) for r in index])
    sess = np.array([int(r["session"]) for r in index])
    rep = verification_metrics(pair_scores(emb[sess == 1], ids[sess == 1], emb[sess == 2], ids[sess == 2]))
    summary = json.loads((work / "reports" / "verify_f2p" / "summary.json").read_text())
    assert summary["auc"] == rep.auc and summary["eer_percent"] == rep.eer
    for name in ("roc.png", "far_frr.png", "curve.csv", "separation.json"):
        assert (work / "reports" / "verify_f2p" / name).is_file()


def test_quality_table_format(work):
    with open(work / "reports" / "quality" / "quality.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["variant"] for r in rows] == ["I", "I_flash", "I_diff", "I_fuse", "I_enh"]
    for r in rows:
        for k in ("local_contrast", "sharpness", "edge_clarity"):
            assert np.isfinite(float(r[k])) and float(r[k]) >= 0


def test_stage_rerun_is_byte_identical(work):
    before = (work / "models" / "embedder_I.ckpt").read_bytes()
    assert run(work, "train-embed", "--variant", "I") == 0
    assert (work / "models" / "embedder_I.ckpt").read_bytes() == before


def test_missing_prerequisite_names_path(tmp_path, capsys):
    assert run(tmp_path, "fuse") == 2
    err = capsys.readouterr().err
    assert "missing prerequisite" in err and str(tmp_path) in err
    assert run(tmp_path, "verify", "--name", "nothing") == 2
    assert "embeddings" in capsys.readouterr().err


def test_ingest_reports_orphans(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path), "--ids", "2", "--impressions", "1"]) == 0
    victim = sample_path(tmp_path / "data", 2, 1, 1, "nonflash")
    victim.unlink()
    assert main(["ingest", "--out", str(tmp_path)]) == 2
    assert str(sample_path(tmp_path / "data", 2, 1, 1, "flash")) in capsys.readouterr().err
    shutil.rmtree(tmp_path / "data" / "subjects")
    assert main(["ingest", "--out", str(tmp_path)]) == 2
    assert "no subjects found" in capsys.readouterr().err


def test_flags_before_or_after_command_and_overrides(tmp_path):
    p = build_parser()
    a = p.parse_args(["--seed", "3", "align", "--spatial-transform", "--dim", "256", "--set", "embed.margin=0.3"])
    cfg = resolve_config(a)
    assert cfg.seed == 3 and cfg.spatial_transform and cfg.dim == 256 and cfg.embed.margin == 0.3
    assert main(["align", "--config", str(tmp_path / "none.cfg")]) == 2
    assert main(["align", "--set", "bogus=1"]) == 2


def test_thread_count_does_not_change_outputs(tmp_path, monkeypatch):
    outs = {}
    for n in ("1", "4"):
        monkeypatch.setenv("F2P_THREADS", n)
        out = tmp_path / f"t{n}"
        for stage in (["synth"], ["ingest"], ["align"], ["segment"], ["diff"]):
            assert run(out, *stage) == 0, (n, stage)
        outs[n] = {p.relative_to(out): p.read_bytes() for p in sorted((out / "stages").rglob("*.png"))}
    assert outs["1"] and outs["1"] == outs["4"]
