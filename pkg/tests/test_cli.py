import json
import re
import shutil
import subprocess

import pytest

from hgmesh.cli import EPILOG, main
from hgmesh.mesh_io import load_mesh, prepare
from hgmesh.sequencer import read_mtok, write_mtok

ERROR_LINE = re.compile(r"^error: code=[a-z-]+ exit=(\d+) message=.+$", re.M)

TINY = ["data.quant_level=32", "model.depths=[1,1,1]", "model.channels=32", "model.head_channels=16",
        "model.ffn_hidden=64", "model.window=108", "model.num_latents=8", "data.count=6",
        "data.num_points=64", "training.steps=3", "training.batch_size=2", "training.segment=108",
        "training.warmup=1", "training.log_every=1"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    assert run("gen-dataset", out, "--count", 4, "--seed", 3) == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    args = ["train", out, "--quiet"]
    for s in TINY:
        args += ["--set", s]
    assert run(*args) == 0
    return out


def assert_error(capsys, code):
    err = capsys.readouterr().err
    m = ERROR_LINE.search(err)
    assert m and int(m.group(1)) == code, err


class TestCodec:
    def test_round_trip(self, corpus, tmp_path):
        src = corpus / "mesh_00000.obj"
        assert run("encode", src, tmp_path / "a.mtok", "--quant-level", 128) == 0
        assert run("decode", tmp_path / "a.mtok", tmp_path / "a.obj") == 0
        again = prepare(load_mesh(tmp_path / "a.obj"), 128)
        assert again.face_set() == prepare(load_mesh(src), 128).face_set()
        assert run("validate", tmp_path / "a.mtok") == 0

    def test_validate_every_encoding(self, corpus, tmp_path):
        paths = []
        for i, obj in enumerate(sorted(corpus.glob("*.obj"))):
            p = tmp_path / f"{i}.mtok"
            assert run("encode", obj, p, "--quant-level", 1024) == 0
            paths.append(p)
        assert run("validate", *paths) == 0

    def test_validate_rejects_bad_order(self, tmp_path, capsys):
        q = 128
        bad = [q] * 9 + [0, 9, 3, 0, 2, 0, 1, 2, 5] + [q + 1] * 9
        write_mtok(tmp_path / "bad.mtok", bad, q)
        assert run("validate", tmp_path / "bad.mtok") == 4
        assert_error(capsys, 4)

    def test_stats_csv(self, corpus, tmp_path, capsys):
        assert run("stats", corpus, "--output", tmp_path / "s.csv") == 0
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0].startswith("Q,mean_invalid_fraction,slot_0") and len(lines) == 3

    def test_sample_points(self, corpus, tmp_path):
        assert run("sample-points", corpus / "mesh_00001.obj", tmp_path / "p.ply", "--points", 100) == 0
        assert (tmp_path / "p.ply").read_bytes().startswith(b"ply")


class TestDataset:
    def test_manifest(self, corpus):
        rows = (corpus / "manifest.csv").read_text().splitlines()
        assert rows[0].startswith("file,seed") and len(rows) == 5
        assert json.loads((corpus / "generator.json").read_text())["family"] == "mixed"

    def test_deterministic(self, tmp_path):
        for name in ("a", "b"):
            assert run("gen-dataset", tmp_path / name, "--count", 3) == 0
        for f in ("mesh_00000.obj", "mesh_00002.obj", "manifest.csv"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


class TestTrainGenerate:
    def test_outputs(self, trained):
        for name in ("resolved_config.toml", "metrics.csv", "metrics.png", "model.mtck"):
            assert (trained / name).exists(), name
        header = (trained / "metrics.csv").read_text().splitlines()[0]
        assert header == "step,loss,ppl,lr,tokens_per_s"

    def test_resolved_config_reproduces_run(self, trained, tmp_path):
        assert run("train", tmp_path, "--quiet", "--config", trained / "resolved_config.toml") == 0
        assert (tmp_path / "model.mtck").read_bytes() == (trained / "model.mtck").read_bytes()
        loss = [line.split(",")[1] for line in (trained / "metrics.csv").read_text().splitlines()]
        again = [line.split(",")[1] for line in (tmp_path / "metrics.csv").read_text().splitlines()]
        assert loss == again

    def test_generate_face_limit(self, trained, corpus, tmp_path):
        out = tmp_path / "g.obj"
        assert run("generate", trained / "model.mtck", out, "--faces", 10, "--mesh",
                   corpus / "mesh_00000.obj", "--seed", 1) == 0
        info = json.loads(out.with_suffix(".obj.json").read_text())
        assert info["halt_reason"] in ("eos", "face_limit")
        assert info["faces_emitted"] <= 20
        text = out.read_text()
        assert sum(line.startswith("f ") for line in text.splitlines()) <= 20

    def test_generate_bit_identical(self, trained, corpus, tmp_path):
        for name in ("a.obj", "b.obj"):
            assert run("generate", trained / "model.mtck", tmp_path / name, "--faces", 5, "--mesh",
                       corpus / "mesh_00002.obj", "--seed", 4) == 0
        assert (tmp_path / "a.obj").read_bytes() == (tmp_path / "b.obj").read_bytes()

    def test_generate_needs_cloud(self, trained, tmp_path, capsys):
        assert run("generate", trained / "model.mtck", tmp_path / "x.obj", "--faces", 5) == 2
        assert_error(capsys, 2)

    def test_eval(self, trained, corpus, tmp_path):
        assert run("eval", trained / "model.mtck", corpus, tmp_path, "--chamfer-trials", 1,
                   "--samples", 500) == 0
        summary = json.loads((tmp_path / "summary.json").read_text())
        assert summary["meshes"] == 4 and "chamfer_within_3x_floor" in summary
        for name in ("ppl_profile.csv", "ppl_profile.png", "chamfer.csv", "chamfer.png"):
            assert (tmp_path / name).exists(), name


class TestBenchCost:
    def test_cost_model(self, tmp_path, capsys):
        assert run("cost-model", "--output", tmp_path / "c.csv") == 0
        out = capsys.readouterr().out
        assert "Plain-24" in out and "HG-4-8-12" in out
        assert (tmp_path / "c.png").exists()
        assert len((tmp_path / "c.csv").read_text().splitlines()) == 4

    def test_bench(self, tmp_path):
        assert run("bench", tmp_path / "b.csv", "--depths", "1-1-1", "--channels", 32, "--window", 27,
                   "--probe", 9) == 0
        lines = (tmp_path / "b.csv").read_text().splitlines()
        assert lines[0] == "length,tokens_per_s,peak_cache_entries,rolling_cache,threads"
        assert len(lines) == 1 + 4 + 3
        assert (tmp_path / "b.png").exists()


class TestErrors:
    def test_missing_file(self, tmp_path, capsys):
        assert run("encode", tmp_path / "nope.obj", tmp_path / "x.mtok") == 3
        assert_error(capsys, 3)

    def test_bad_obj(self, tmp_path, capsys):
        (tmp_path / "bad.obj").write_text("v 0 0\n")
        assert run("encode", tmp_path / "bad.obj", tmp_path / "x.mtok") == 4
        assert_error(capsys, 4)

    def test_unknown_config_key(self, tmp_path, capsys):
        assert run("train", tmp_path, "--set", "model.bogus=1") == 5
        assert_error(capsys, 5)

    def test_bad_flag(self, capsys):
        assert run("encode") == 2
        assert_error(capsys, 2)

    def test_help_documents_exit_codes(self, capsys):
        assert run("--help") == 0
        out = capsys.readouterr().out
        for code in range(7):
            assert f"  {code}  " in out
        assert "exit codes" in EPILOG

    def test_mtok_is_reproducible(self, corpus, tmp_path):
        for name in ("a", "b"):
            assert run("encode", corpus / "mesh_00003.obj", tmp_path / f"{name}.mtok") == 0
        assert (tmp_path / "a.mtok").read_bytes() == (tmp_path / "b.mtok").read_bytes()
        tokens, q = read_mtok(tmp_path / "a.mtok")
        assert q == 128 and len(tokens) % 9 == 0


@pytest.mark.skipif(shutil.which("hgmesh") is None, reason="console script not installed")
def test_console_script():
    res = subprocess.run(["hgmesh", "cost-model", "--depths", "2-2-2", "--length", "900"],
                         capture_output=True, text=True, check=False)
    assert res.returncode == 0 and "HG-2-2-2" in res.stdout
