"""Command-line interface: each subcommand drives the engine and reports
or fails with a sensible exit code."""
import json
import os
from pathlib import Path

import numpy as np
import pytest

from dialbench.assess import write_reference_csv
from dialbench.cli import main
from dialbench.inference import SegmentationMap
from dialbench.rle import decode_mask


@pytest.fixture
def cli_root(bench) -> Path:
    """The trained workbench re-rooted the way the CLI expects: corpus
    reachable at <root>/corpus."""
    link = bench.root / "corpus"
    if not link.exists():
        os.symlink(bench.corpus_dir, link)
    return bench.root


def test_generate_and_init(tmp_path, capsys):
    corpus = tmp_path / "corpus"
    rc = main(
        [
            "generate", "--out", str(corpus), "--train", "1", "--test", "1",
            "--size", "1024", "--seed", "3", "--fraction", "0.08",
        ]
    )
    assert rc == 0
    assert "generated 2 cases" in capsys.readouterr().out
    payload = json.loads((corpus / "cases.json").read_text())
    assert len(payload["cases"]) == 2
    refs = (corpus / "refs.csv").read_text().splitlines()
    assert refs[0] == "case_id,R_PATH" and len(refs) == 3

    rc = main(["init", "--root", str(tmp_path / "wb"), "--corpus", str(corpus),
               "--patch-size", "32", "--base-channels", "2", "--depth", "2"])
    assert rc == 0
    assert "workbench ready" in capsys.readouterr().out
    cfg = json.loads((tmp_path / "wb" / "state" / "config.json").read_text())
    assert cfg["patch_size"] == 32 and cfg["base_channels"] == 2


def test_init_requires_corpus(tmp_path, capsys):
    rc = main(["init", "--root", str(tmp_path / "wb"), "--corpus", str(tmp_path / "nope")])
    assert rc == 1
    assert "no corpus" in capsys.readouterr().err


def test_status_outputs_state_json(cli_root, capsys):
    assert main(["status", "--root", str(cli_root)]) == 0
    state = json.loads(capsys.readouterr().out)
    assert state["status"] == "awaiting_correction"
    assert state["rounds"][0]["model_id"] == "model1"


def test_segment_writes_map(cli_root, bench, tmp_path, capsys):
    sid = bench.slide_ids("test")[0]
    out = tmp_path / "one.seg"
    rc = main(["segment", "--root", str(cli_root), "--slide", sid, "--out", str(out)])
    assert rc == 0
    assert sid in capsys.readouterr().out
    data, _ = decode_mask(out.read_bytes())
    assert data.shape == (1024, 1024)
    assert data.max() < 7


def test_segment_without_model_fails(tmp_path, capsys):
    rc = main(["segment", "--root", str(tmp_path / "empty"), "--slide", "x"])
    assert rc == 1
    assert "no trained model" in capsys.readouterr().err


def test_correct_finetune_satisfy_flow(cli_root, bench, capsys):
    rc = main(["correct", "--root", str(cli_root), "--oracle", "--budget", "20000"])
    assert rc == 0
    assert "submitted" in capsys.readouterr().out

    rc = main(["finetune", "--root", str(cli_root), "--weighting", "single"])
    assert rc == 0
    assert "model2a" in capsys.readouterr().out

    rc = main(["satisfy", "--root", str(cli_root)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "satisfied" in out and "model2a" in out


def test_correct_from_mask_directory(cli_root, bench, tmp_path, capsys):
    from dialbench.rounds import oracle_correct

    masks = oracle_correct(bench, budget_pixels=5000)
    mask_dir = tmp_path / "masks"
    mask_dir.mkdir()
    for m in masks:
        m.save(mask_dir / f"{m.slide_id}.mask")
    rc = main(["correct", "--root", str(cli_root), "--from", str(mask_dir)])
    assert rc == 0
    assert f"round 1" in capsys.readouterr().out


def test_correct_rejects_wrong_round_masks(cli_root, bench, tmp_path, capsys):
    from dialbench.classes import UNLABELED
    from dialbench.wsi import LabelMask

    sid = bench.slide_ids("train")[0]
    data = np.full((1024, 1024), UNLABELED, np.uint8)
    data[0, 0] = 1
    mask_dir = tmp_path / "masks"
    mask_dir.mkdir()
    LabelMask(slide_id=sid, round=7, data=data).save(mask_dir / f"{sid}.mask")
    rc = main(["correct", "--root", str(cli_root), "--from", str(mask_dir)])
    assert rc == 1
    assert "expected 1" in capsys.readouterr().err


def test_assess_offline_mode(tmp_path, capsys):
    cases = tmp_path / "cases"
    for cid, (vt, nt) in {"caseA": (30, 10), "caseB": (5, 15)}.items():
        d = cases / cid
        d.mkdir(parents=True)
        data = np.full((20, 20), 4, np.uint8)
        data.ravel()[:vt] = 0
        data.ravel()[vt : vt + nt] = 2
        SegmentationMap(f"{cid}_s0", "h", data).save(d / f"{cid}_s0.seg")
    refs = {"caseA": 0.5, "caseB": 0.75}
    write_reference_csv(tmp_path / "refs.csv", refs)
    out = tmp_path / "report"
    rc = main(["assess", "--cases", str(cases), "--refs", str(tmp_path / "refs.csv"),
               "--out", str(out)])
    assert rc == 0
    report = json.loads((out / "report.json").read_text())
    # caseA: r_dl 10/40 = 0.25 vs 0.5 -> 0.25; caseB: 15/20 = 0.75 vs 0.75 -> 0
    assert report["error_rate"] == pytest.approx(0.125)
    assert "E = 0.1250" in capsys.readouterr().out


def test_assess_model_comparison(cli_root, capsys):
    rc = main(["assess", "--root", str(cli_root), "--out", str(cli_root / "reports")])
    assert rc == 0
    out = capsys.readouterr().out
    assert "model1: E =" in out
    report = json.loads((cli_root / "reports" / "report.json").read_text())
    assert len(report["models"]) == 2  # single model duplicated into a table


def test_assess_without_models_fails(tmp_path, capsys):
    rc = main(["assess", "--root", str(tmp_path / "none")])
    assert rc == 1
    assert "no trained models" in capsys.readouterr().err


def test_unknown_command_exits():
    with pytest.raises(SystemExit):
        main(["frobnicate"])
    with pytest.raises(SystemExit):
        main([])
