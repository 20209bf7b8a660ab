import json
import time

import numpy as np
import pytest

from linvt import cli, formats
from linvt.model import Config, build, save


def write_cfg(path, **fields):
    path.write_text(Config(**fields).to_json())
    return str(path)


@pytest.fixture
def stream_file(tmp_path):
    p = tmp_path / "in.lvt"
    formats.write_stream(p, np.random.default_rng(0).standard_normal((16, 16, 64)))
    return str(p)


def run(*argv):
    return cli.main(list(argv))


class TestTokenize:
    def test_desk_output_count(self, stream_file, tmp_path):
        out = tmp_path / "out.lvt"
        assert run("tokenize", "--input", stream_file, "--output", str(out), "--text", "find the beta") == 0
        tokens, code = formats.read_stream(out)
        assert tokens.shape == (1, 14, 64) and code == 2

    def test_degenerate_identity(self, tmp_path):
        tok = np.random.default_rng(1).standard_normal((1, 1, 8))
        src, dst = tmp_path / "a.lvt", tmp_path / "b.lvt"
        formats.write_stream(src, tok)
        cfg = write_cfg(tmp_path / "c.json", channels=8, heads=2, k=1, scales=((1, 1),), queries=(1,), depth=1)
        assert run("tokenize", "--config", cfg, "--input", str(src), "--output", str(dst)) == 0
        assert np.array_equal(formats.read_stream(dst)[0], tok)

    def test_float32_input_keeps_code(self, tmp_path):
        src, dst = tmp_path / "a.lvt", tmp_path / "b.lvt"
        formats.write_stream(src, np.ones((2, 3, 64)), 1)
        assert run("tokenize", "--input", str(src), "--output", str(dst)) == 0
        assert formats.read_stream(dst)[1] == 1

    def test_segment(self, tmp_path):
        rng = np.random.default_rng(2)
        a, b = rng.standard_normal(64), rng.standard_normal(64)
        frames = np.concatenate([np.tile(a, (3, 4, 1)), np.tile(b, (2, 4, 1))])
        src, dst = tmp_path / "a.lvt", tmp_path / "b.lvt"
        formats.write_stream(src, frames + 0.01 * rng.standard_normal(frames.shape))
        assert run("tokenize", "--input", str(src), "--output", str(dst), "--segment") == 0
        assert formats.read_stream(dst)[0].shape == (1, 28, 64)
        clips = cli.segment(cli.read_input(src)[0])
        assert [c.frames for c in clips] == [3, 2]

    def test_corrupt_magic(self, tmp_path):
        src = tmp_path / "bad.lvt"
        src.write_bytes(b"XXXX" + bytes(40))
        assert run("tokenize", "--input", str(src), "--output", str(tmp_path / "o.lvt")) == 2
        assert not (tmp_path / "o.lvt").exists()

    def test_missing_input(self, tmp_path):
        assert run("tokenize", "--input", str(tmp_path / "nope.lvt"), "--output", str(tmp_path / "o")) == 4

    def test_channel_mismatch(self, tmp_path):
        src = tmp_path / "a.lvt"
        formats.write_stream(src, np.ones((2, 2, 8)))
        assert run("tokenize", "--input", str(src), "--output", str(tmp_path / "o")) == 3

    def test_weights_must_match_config(self, stream_file, tmp_path):
        w = tmp_path / "w.lvtw"
        save(build(Config(channels=8, heads=2)).weights, w)
        assert run("tokenize", "--weights", str(w), "--input", stream_file, "--output", str(tmp_path / "o")) == 3

    def test_corrupt_weights(self, stream_file, tmp_path):
        w = tmp_path / "w.lvtw"
        w.write_bytes(b"LVTW\x01")
        assert run("tokenize", "--weights", str(w), "--input", stream_file, "--output", str(tmp_path / "o")) == 2

    def test_bad_config_json(self, stream_file, tmp_path):
        c = tmp_path / "c.json"
        c.write_text("{nope")
        assert run("tokenize", "--config", str(c), "--input", stream_file, "--output", str(tmp_path / "o")) == 2
        c.write_text(json.dumps({"channels": 10, "heads": 4}))
        assert run("tokenize", "--config", str(c), "--input", stream_file, "--output", str(tmp_path / "o")) == 3


class TestInspect:
    def test_mask_dump_shape(self, stream_file, tmp_path, capsys):
        assert run("inspect", "--input", stream_file, "--top", "20") == 0
        rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
        assert len(rows) == 16
        assert sum(len(r["selected"]) for r in rows) == 20
        for r in rows:
            assert r["selected"] == sorted(set(r["selected"]))
            assert all(0 <= p < 16 for p in r["selected"])
            assert len(r["scores"]) == 16

    def test_uniform_stream(self, tmp_path, capsys):
        src = tmp_path / "u.lvt"
        formats.write_stream(src, np.tile(np.random.default_rng(0).standard_normal(64), (4, 8, 1)))
        assert run("inspect", "--input", str(src)) == 0
        scores = np.array([json.loads(line)["scores"] for line in capsys.readouterr().out.splitlines()])
        assert scores.max() / scores.min() < 1.05

    def test_planted_token(self, tmp_path, capsys):
        from test_svr import planted_model

        model, u = planted_model()
        rng = np.random.default_rng(4)
        x = rng.standard_normal((6, 5, 8))
        x[2, 3] = 3.0 * u
        src, w = tmp_path / "p.lvt", tmp_path / "w.lvtw"
        formats.write_stream(src, x)
        save(model.weights, w)
        cfg = tmp_path / "c.json"
        cfg.write_text(model.cfg.to_json())
        assert run("inspect", "--input", str(src), "--weights", str(w), "--config", str(cfg), "--top", "1") == 0
        rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
        assert rows[2]["selected"] == [3]

    def test_writes_file(self, stream_file, tmp_path):
        out = tmp_path / "mask.jsonl"
        assert run("inspect", "--input", stream_file, "--output", str(out)) == 0
        assert len(out.read_text().splitlines()) == 16

    def test_bad_top(self, stream_file):
        assert run("inspect", "--input", stream_file, "--top", "0") == 64


class TestSelftest:
    def test_fresh_build_passes(self, capsys):
        t0 = time.perf_counter()
        assert run("selftest") == 0
        assert time.perf_counter() - t0 < 60
        table = capsys.readouterr().out
        assert "FAIL" not in table and "gradients" in table

    def test_nan_weights_reported(self, tmp_path, capsys):
        model = build(Config.desk())
        bad = model.weights["svr.spatial.0.attn.wq"].data.copy()
        bad[0, 0] = np.nan
        model.weights.set("svr.spatial.0.attn.wq", bad)
        w = tmp_path / "nan.lvtw"
        save(model.weights, w)
        assert run("selftest", "--weights", str(w), "--grad-seeds", "1") == 1
        table = capsys.readouterr().out
        assert "numeric input" in table
        row = next(line for line in table.splitlines() if line.startswith("convex provenance"))
        assert "FAIL" in row


class TestTrainEval:
    def test_zero_steps(self, tmp_path):
        assert run("train", "--steps", "0") == 64

    def test_unknown_flag(self):
        assert run("train", "--steps", "2", "--bogus") == 64

    def test_same_seed_same_log(self, tmp_path):
        cfg = write_cfg(tmp_path / "c.json", channels=8, heads=2, k=8, queries=(2, 1, 1), depth=1)
        logs = []
        for i in range(2):
            p = tmp_path / f"log{i}.jsonl"
            assert run("train", "--config", cfg, "--steps", "3", "--seed", "7", "--eval-every", "2",
                       "--log", str(p), "--out", str(tmp_path / f"w{i}.lvtw")) == 0
            logs.append(p.read_text())
        assert logs[0] == logs[1]
        recs = [json.loads(line) for line in logs[0].splitlines()]
        assert [r["step"] for r in recs] == [0, 1, 2, 3]
        assert (tmp_path / "w0.lvtw").read_bytes() == (tmp_path / "w1.lvtw").read_bytes()

    def test_env_seed(self, tmp_path, monkeypatch):
        cfg = write_cfg(tmp_path / "c.json", channels=8, heads=2, k=8, queries=(2, 1, 1), depth=1)
        outs = []
        for seed in ("3", "3", "4"):
            monkeypatch.setenv("LINVT_SEED", seed)
            p = tmp_path / f"log{len(outs)}.jsonl"
            assert run("train", "--config", cfg, "--steps", "2", "--eval-every", "0", "--log", str(p)) == 0
            outs.append(p.read_text())
        assert outs[0] == outs[1] != outs[2]

    def test_divergence_exit(self, tmp_path, monkeypatch):
        from linvt import tensor as T
        from linvt import train

        monkeypatch.setattr(train, "loss", lambda out, task, **kw: T.tsum(out.tokens) * float("nan"))
        assert run("train", "--steps", "2", "--eval-every", "0", "--log", str(tmp_path / "l")) == 5

    def test_eval_rows(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "c.json", channels=8, heads=2, k=8, queries=(2, 1, 1), depth=1)
        assert run("eval", "--config", cfg, "--steps", "2", "--tasks", "4") == 0
        rows = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
        assert [r["variant"] for r in rows] == ["Avg", "SingleA", "MultiA", "MultiB", "MultiC"]
        assert all(0 <= r["accuracy"] <= 1 for r in rows)


class TestBench:
    def test_single_iter(self, capsys):
        assert run("bench", "--iters", "1", "--frames", "4", "--per-frame", "8") == 0
        report = json.loads(capsys.readouterr().out)
        assert report["output_tokens"] == 14
        assert report["compression"] == pytest.approx(32 / 14)
        assert set(report["latency_ms"]) == {"p50", "p90", "p99"}

    def test_full_scale_compression(self, tmp_path, capsys):
        cfg = write_cfg(tmp_path / "c.json", channels=8, heads=2, k=2048, queries=(64, 32, 16), depth=1,
                        spatial_layers=1, temporal_layers=1)
        assert run("bench", "--config", cfg, "--iters", "1", "--frames", "128", "--per-frame", "256") == 0
        assert json.loads(capsys.readouterr().out)["compression"] == pytest.approx(32768 / 112)

    def test_latency_grows_with_frames(self, capsys):
        medians = []
        for frames in (2, 16, 64):
            assert run("bench", "--iters", "5", "--frames", str(frames), "--per-frame", "16") == 0
            medians.append(json.loads(capsys.readouterr().out)["latency_ms"]["p50"])
        assert medians == sorted(medians)

    def test_zero_iters(self):
        assert run("bench", "--iters", "0") == 64
