import json

import pytest

from rsllm.cli import main

TINY = {
    "preset": "desk",
    "seed": 0,
    "data": {"synthetic": {"n_items": 40, "n_sequences": 60, "length_range": [5, 8], "seed": 2},
             "max_history": 3, "validation_users": 10, "test_users": 12},
    "backbone": {"kind": "gru4rec", "d": 8, "epochs": 1},
    "lm": {"d_model": 16, "context": 256, "pretrain_steps": 6, "pretrain_batch_size": 4, "pretrain_prompts": 4,
           "lookup_sequences": 4, "short_list_steps": 2, "lora_rank": 2},
    "stage1": {"epochs": 1, "batch_size": 16},
    "stage2": {"epochs": 1, "batch_size": 16},
    "eval": {"max_new_tokens": 4},
}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = dict(TINY, output_dir=str(root / "run"))
    path = root / "config.json"
    path.write_text(json.dumps(cfg))
    assert main(["train-backbone", "--config", str(path)]) == 0
    assert main(["pretrain-lm", "--config", str(path)]) == 0
    assert main(["train", "--config", str(path)]) == 0
    return root, path


def test_train_outputs(run_dir):
    root, _ = run_dir
    out = root / "run"
    for name in ("backbone.ckpt", "item_emb.ckpt", "lm_base.ckpt", "vocab.tsv", "stage1.ckpt", "stage2.ckpt",
                 "config.json", "manifest.json", "timings.json"):
        assert (out / name).exists(), name
    doc = json.loads((out / "manifest.json").read_text())
    assert doc["ablation"] == "full" and "stage1" in doc and "input_hashes" in doc


def test_evaluate_is_byte_identical(run_dir, tmp_path):
    root, _ = run_dir
    ckpt = root / "run" / "stage2.ckpt"
    for mode in ("generative", "ranking"):
        outs = []
        for k in range(2):
            d = tmp_path / f"{mode}{k}"
            assert main(["evaluate", "--checkpoint", str(ckpt), "--mode", mode, "--out", str(d)]) == 0
            outs.append(sorted((p.name, p.read_bytes()) for p in d.iterdir()))
        assert outs[0] == outs[1]
        assert {n for n, _ in outs[0]} == {f"report_stage2_{mode}.json", f"report_stage2_{mode}.csv"}


def test_train_rerun_manifest_identical(run_dir, tmp_path):
    root, path = run_dir
    first = (root / "run" / "manifest.json").read_bytes()
    again = tmp_path / "again"
    again.mkdir()
    for name in ("lm_base.ckpt", "vocab.tsv", "item_emb.ckpt"):
        (again / name).write_bytes((root / "run" / name).read_bytes())
    assert main(["train", "--config", str(path), "--output-dir", str(again)]) == 0
    a, b = json.loads(first), json.loads((again / "manifest.json").read_bytes())
    a.pop("output_dir", None), b.pop("output_dir", None)
    a["config"].pop("output_dir"), b["config"].pop("output_dir")
    assert a == b


def test_hybrid_train_without_export_names_artifact(run_dir, tmp_path, capsys):
    root, path = run_dir
    bare = tmp_path / "bare"
    bare.mkdir()
    for name in ("lm_base.ckpt", "vocab.tsv"):
        (bare / name).write_bytes((root / "run" / name).read_bytes())
    assert main(["train", "--config", str(path), "--output-dir", str(bare)]) == 1
    assert "item_emb.ckpt" in capsys.readouterr().err
    assert main(["train", "--config", str(path), "--output-dir", str(bare), "--stage1-only"]) == 0


def test_usage_and_config_errors(tmp_path, capsys):
    assert main([]) == 1
    assert main(["train"]) == 1
    assert main(["no-such-command"]) == 1
    assert main(["train", "--config", str(tmp_path / "nope.json")]) == 1
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"stage1": {"lr": -1}}))
    assert main(["pretrain-lm", "--config", str(bad)]) == 1
    assert "stage1.lr" in capsys.readouterr().err


def test_unknown_ablation_lists_keys(run_dir, capsys):
    _, path = run_dir
    assert main(["train", "--config", str(path), "--ablation", "wo_everything"]) == 1
    err = capsys.readouterr().err
    assert "wo_everything" in err and "wo_contrastive" in err


def test_gen_synthetic_and_prepare_data(tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"n_items": 60, "n_sequences": 40}))
    out = tmp_path / "syn"
    assert main(["gen-synthetic", "--spec", str(spec), "--out", str(out), "--seed", "4"]) == 0
    assert (out / "interactions.tsv").exists() and (out / "transitions.json").exists()
    prep = tmp_path / "prep"
    assert main(["prepare-data", "--interactions", str(out / "interactions.tsv"),
                 "--catalog", str(out / "catalog.tsv"), "--out", str(prep)]) == 0
    stats = json.loads((prep / "stats.json").read_text())
    assert stats["sequences"] == 40 and stats["items"] == 60
    cands = json.loads((prep / "candidates.json").read_text())
    assert len(cands["test"]) == 40 and all(len(c["candidates"]) == 20 for c in cands["test"])
    spec.write_text(json.dumps({"n_itemz": 3}))
    assert main(["gen-synthetic", "--spec", str(spec), "--out", str(out)]) == 1


def test_ablate_small_matrix(run_dir, tmp_path):
    root, path = run_dir
    cfg = json.loads(path.read_text())
    cfg["output_dir"] = str(tmp_path / "abl")
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    matrix = tmp_path / "m.json"
    matrix.write_text(json.dumps(["stage1_only", "wo_contrastive"]))
    assert main(["ablate", "--config", str(p), "--matrix", str(matrix), "--seeds", "1"]) == 0
    lines = (tmp_path / "abl" / "ablation.csv").read_text().splitlines()
    assert lines[0].startswith("model,dataset,mode,seed_count") and len(lines) == 3
    matrix.write_text(json.dumps(["nope"]))
    assert main(["ablate", "--config", str(p), "--matrix", str(matrix), "--seeds", "1"]) == 1


def test_selftest(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    lines = [l for l in out.splitlines() if l.startswith(("PASS", "FAIL"))]
    assert len(lines) >= 30 and not any(l.startswith("FAIL") for l in lines)
