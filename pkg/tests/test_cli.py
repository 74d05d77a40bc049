import json

import pytest

from m3ae.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, content_hash, git_blob_hash, main

TINY_TRAIN = ["pretrain.epochs=1", "pretrain.batch_size=8", "pretrain.warmup_epochs=0"]


def _ov(*items):
    out = []
    for item in items:
        out += ["--override", item]
    return out


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(root / "shapes"), *_ov("synthetic.n=24")]) == EXIT_OK
    assert main(["gen-data", "--out", str(root / "noise"),
                 *_ov("synthetic.n=24", "synthetic.kind='noise'")]) == EXIT_OK
    return root


def test_git_blob_hash_matches_git():
    # `printf 'hello\n' | git hash-object --stdin`
    assert git_blob_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"
    assert content_hash({"a": "1", "b": "2"}) == content_hash({"b": "2", "a": "1"})


def test_gen_data_is_deterministic(data, tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), *_ov("synthetic.n=24")]) == EXIT_OK
    for name in ("data.jsonl", "data.header.json", "data.vocab.txt", "images/00007.png"):
        assert (tmp_path / name).read_bytes() == (data / "shapes" / name).read_bytes()


def test_usage_errors_exit_1(data, tmp_path, capsys):
    assert main(["no-such-command"]) == EXIT_USAGE
    assert main(["pretrain", "--out", str(tmp_path), *_ov("pretrain.nonsense=1")]) == EXIT_USAGE
    assert "pretrain.nonsense" in capsys.readouterr().err
    assert main(["pretrain", "--out", str(tmp_path)]) == EXIT_USAGE  # no manifest configured
    assert main(["probe", "--out", str(tmp_path), *_ov(f"data.manifest='{data}/shapes/data.jsonl'",
                                                        "probe.epochs='many'")]) == EXIT_USAGE


def test_data_errors_exit_2(tmp_path):
    assert main(["pretrain", "--out", str(tmp_path),
                 *_ov(f"data.manifest='{tmp_path}/missing.jsonl'")]) == EXIT_DATA
    assert main(["probe", "--out", str(tmp_path), "--checkpoint", str(tmp_path / "nope.m3ae"),
                 *_ov(f"data.manifest='{tmp_path}/missing.jsonl'")]) == EXIT_DATA


def test_pretrain_and_downstream(data, tmp_path):
    manifest = f"data.manifest='{data}/shapes/data.jsonl'"
    runs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main(["pretrain", "--out", str(out), "--seed", "3", *_ov(manifest, *TINY_TRAIN)]) == EXIT_OK
        runs.append(out)
    assert (runs[0] / "metrics.csv").read_bytes() == (runs[1] / "metrics.csv").read_bytes()
    cfg = json.loads((runs[0] / "config.json").read_text())
    assert cfg["run"]["seed"] == 3 and cfg["pretrain"]["epochs"] == 1  # overrides are echoed
    summary = json.loads((runs[0] / "summary.json").read_text())
    assert summary["input_hash"] == json.loads((runs[1] / "summary.json").read_text())["input_hash"]
    ckpt = str(runs[0] / "checkpoint.m3ae")

    args = ["--checkpoint", ckpt, *_ov(manifest)]
    assert main(["probe", "--out", str(tmp_path / "probe"), *args,
                 *_ov("probe.epochs=2", "probe.warmup_epochs=0")]) == EXIT_OK
    assert json.loads((tmp_path / "probe/summary.json").read_text())["results"]["accuracy"] >= 0
    assert main(["finetune", "--out", str(tmp_path / "ft"), *args,
                 *_ov("finetune.epochs=1", "finetune.warmup_epochs=0", "finetune.blocks=1")]) == EXIT_OK
    assert (tmp_path / "ft/finetuned.m3ae").is_file()
    assert main(["ood", "--out", str(tmp_path / "ood"), *args,
                 *_ov(f"data.ood_manifest='{data}/noise/data.jsonl'", "ood.epochs=1",
                      "ood.warmup_epochs=0")]) == EXIT_OK
    report = json.loads((tmp_path / "ood/ood_report.json").read_text())
    assert 0.0 <= report["auroc"] <= 1.0

    for name in ("r1", "r2"):
        assert main(["export-recon", "--out", str(tmp_path / name), *args, *_ov("export.n=2")]) == EXIT_OK
    pngs = sorted(p.name for p in (tmp_path / "r1/recon").glob("*.png"))
    assert len(pngs) == 8
    for p in pngs:
        assert (tmp_path / "r1/recon" / p).read_bytes() == (tmp_path / "r2/recon" / p).read_bytes()
    assert main(["export-attn", "--out", str(tmp_path / "attn"), *args,
                 *_ov("export.tokens=[0]", "export.patches=[0]")]) == EXIT_OK
    assert len(list((tmp_path / "attn/attention").glob("*_attn_*"))) == 3
    assert main(["export-embed", "--out", str(tmp_path / "emb"), *args]) == EXIT_OK
    assert len((tmp_path / "emb/embeddings.csv").read_text().splitlines()) == 25


def test_resume_through_cli(data, tmp_path):
    manifest = f"data.manifest='{data}/shapes/data.jsonl'"
    train = _ov(manifest, "pretrain.epochs=2", "pretrain.batch_size=8", "pretrain.warmup_epochs=0")
    assert main(["pretrain", "--out", str(tmp_path / "full"), *train]) == EXIT_OK
    assert main(["pretrain", "--out", str(tmp_path / "part"), *train, *_ov("pretrain.stop_at=4")]) == EXIT_OK
    assert main(["pretrain", "--out", str(tmp_path / "part"), "--resume",
                 str(tmp_path / "part/checkpoint.m3ae"), *train]) == EXIT_OK
    assert (tmp_path / "full/metrics.csv").read_text() == (tmp_path / "part/metrics.csv").read_text()


def test_sweep_command(data, tmp_path):
    assert main(["sweep-text-ratio", "--out", str(tmp_path), *_ov(
        f"data.manifest='{data}/shapes/data.jsonl'", "sweep.ratios=[0.25, 0.75]", *TINY_TRAIN,
        "probe.epochs=2", "probe.warmup_epochs=0")]) == EXIT_OK
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "r_txt,probe_accuracy" and [l.split(",")[0] for l in lines[1:]] == ["0.25", "0.75"]


def test_grad_check_command(tmp_path, capsys):
    assert main(["grad-check", "--out", str(tmp_path), *_ov("grad_check.n_samples=5")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out and "model loss" in out
