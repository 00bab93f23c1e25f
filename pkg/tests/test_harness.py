import csv
import io
import json

import numpy as np
import pytest

from kv_evict.attention import KvCache, ModelConfig, block_prefill, init_model, save_weights
from kv_evict.cli import run
from kv_evict.engine import EvictionConfig, evict_pass, run_sequence
from kv_evict.experiments import (
    RunSpec,
    cmd_deviation,
    cmd_needle,
    cmd_sweep,
    cmd_theorems,
    make_prompt,
    monotonicity_report,
    needle_prompt,
)

SMALL = ["--layers", "1", "--heads", "2", "--d-model", "8", "--vocab", "16", "--seq-len", "24",
         "--generate", "2", "--seeds", "0,1"]


def small_spec(**kw):
    base = dict(
        experiment="deviation",
        model=ModelConfig(1, 2, 8, 16),
        cfg=EvictionConfig(budget=8, block_size=4),
        seq_len=24,
        n_generate=2,
        seeds=(0, 1),
    )
    base.update(kw)
    return RunSpec(**base)


def read_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


class TestDeviation:
    def test_row_count_and_schema(self, tmp_path):
        out = tmp_path / "dev.csv"
        assert run(["deviation", *SMALL, "--budget", "8", "--block", "4", "--out", str(out)]) == 0
        rows = read_csv(out.read_text())
        assert list(rows[0]) == ["policy", "caote_mode", "layer", "mean_nmse", "seed"]
        # 4 policies x 3 modes x 1 layer x 2 seeds + 12 aggregates
        assert len(rows) == 4 * 3 * 1 * 2 + 12
        for r in rows:
            float(r["mean_nmse"])
            assert r["caote_mode"] in {"off", "full", "fast"}
        assert sum(r["layer"] == "all" for r in rows) == 12

    def test_large_budget_gives_zero(self):
        rows = cmd_deviation(small_spec(cfg=EvictionConfig(budget=64, block_size=4)))
        assert all(r["mean_nmse"] == 0.0 for r in rows)

    def test_json_includes_raw_mse(self, tmp_path):
        out = tmp_path / "dev.json"
        assert run(["deviation", *SMALL, "--policy", "h2o", "--caote", "full", "--budget", "8",
                    "--format", "json", "--out", str(out)]) == 0
        rows = json.loads(out.read_text())
        assert {"mean_mse", "mean_nmse"} <= set(rows[0])

    def test_trace_dir(self, tmp_path):
        spec = small_spec(policies=("tova",), modes=("full",), trace_dir=tmp_path / "tr")
        cmd_deviation(spec)
        files = sorted(p.name for p in (tmp_path / "tr").iterdir())
        assert files == [
            "tova_full_b8_m4_s0.csv", "tova_full_b8_m4_s0.jsonl",
            "tova_full_b8_m4_s1.csv", "tova_full_b8_m4_s1.jsonl",
        ]
        header = (tmp_path / "tr" / files[0]).read_text().splitlines()[0]
        assert header == "layer,step,nmse"

    def test_byte_identical_reruns(self, tmp_path):
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        args = ["deviation", *SMALL, "--budget", "6", "--block", "3"]
        run([*args, "--out", str(a)])
        run([*args, "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()


class TestSweep:
    def test_schema_and_rows(self, tmp_path):
        out = tmp_path / "sweep.csv"
        assert run(["sweep", *SMALL, "--policy", "h2o,tova", "--caote", "off,full",
                    "--budget", "4,8", "--block", "2,24", "--out", str(out)]) == 0
        rows = read_csv(out.read_text())
        assert list(rows[0]) == ["policy", "caote_mode", "budget", "block_size", "mean_nmse"]
        assert len(rows) == 2 * 2 * 2 * 2

    def test_full_block_is_single_shot(self):
        spec = small_spec(policies=("h2o",), modes=("off",), n_generate=0)
        model = spec.build_model(0)
        prompt = make_prompt(0, 24, model.d_model)
        r = run_sequence(model, prompt, 0, EvictionConfig(budget=8, block_size=24))
        cache = KvCache.empty(model, EvictionConfig(budget=8).new_state)
        hook_cfg = EvictionConfig(budget=8)
        out, _ = block_prefill(model, prompt, cache, evict=lambda l, h, w: bool(
            [d for d in evict_pass(h, w, hook_cfg, layer=l) if d.triggered]))
        np.testing.assert_array_equal(r.outputs, out)
        assert {d.step for d in r.decisions} == {0}

    @pytest.mark.parametrize("block", [1, 3, 8])
    def test_tokens_evicted_per_pass_bounded_by_block(self, block):
        model = init_model(ModelConfig(1, 2, 8, 16, seed=0))
        r = run_sequence(model, make_prompt(0, 30, 8), 0, EvictionConfig(budget=8, block_size=block), trace=False)
        assert r.decisions
        assert max(d.evicted.size for d in r.decisions) <= block

    def test_monotonicity_lines(self):
        rows = [
            {"policy": "h2o", "caote_mode": "off", "budget": 4, "block_size": 2, "mean_nmse": 0.5},
            {"policy": "h2o", "caote_mode": "off", "budget": 8, "block_size": 2, "mean_nmse": 0.2},
        ]
        assert "non-increasing" in monotonicity_report(rows)[0]


class TestNeedle:
    def test_large_budget_always_survives(self):
        report = cmd_needle(small_spec(experiment="needle", cfg=EvictionConfig(budget=64, block_size=4)))
        assert all(s["survival_rate"] == 1.0 for s in report["summary"])

    def test_sink_keeps_needle_at_start(self):
        spec = small_spec(experiment="needle", policies=("sink",), modes=("off",), depths=(0,),
                          cfg=EvictionConfig(budget=6, block_size=4, sink_count=1))
        report = cmd_needle(spec)
        assert report["summary"][0]["survival_rate"] == 1.0

    def test_depth_out_of_range(self):
        with pytest.raises(ValueError, match="depth"):
            cmd_needle(small_spec(experiment="needle", depths=(24,)))
        assert run(["needle", *SMALL, "--depths", "24"]) == 2

    def test_report_shape(self, tmp_path):
        out = tmp_path / "n.json"
        assert run(["needle", *SMALL, "--policy", "h2o", "--caote", "off,full", "--budget", "8",
                    "--format", "json", "--out", str(out)]) == 0
        report = json.loads(out.read_text())
        assert len(report["summary"]) == 2
        run0 = report["runs"][0]
        assert np.array(run0["survival"]).shape == (1, 2)
        assert np.array(run0["attention_mass"]).shape == (1, 2)
        for s in report["summary"]:
            assert 0.0 <= s["survival_rate"] <= 1.0

    def test_needle_prompt(self):
        p = needle_prompt(0, 20, 8, 5)
        assert np.linalg.norm(p[5]) == pytest.approx(3.0 * np.sqrt(8))
        np.testing.assert_allclose(p[-1] / np.linalg.norm(p[-1]), p[5] / np.linalg.norm(p[5]))


class TestTheorems:
    def test_all_pass(self, capsys):
        assert run(["theorems", "--trials", "100"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert len(out) == 5 and all(line.startswith("PASS") for line in out)

    def test_sabotage_fails(self):
        assert run(["theorems", "--trials", "20", "--sabotage"]) == 1

    def test_zero_trials_vacuous(self, caplog):
        results = cmd_theorems(small_spec(experiment="theorems", trials=0))
        assert all(r.passed for r in results)
        assert "vacuous" in caplog.text

    def test_report_file(self, tmp_path):
        out = tmp_path / "thm.csv"
        assert run(["theorems", "--trials", "10", "--out", str(out)]) == 0
        rows = read_csv(out.read_text())
        assert [r["passed"] for r in rows] == ["True"] * 5


class TestUsage:
    def test_unknown_policy(self):
        with pytest.raises(SystemExit) as exc:
            run(["deviation", "--policy", "lru"])
        assert exc.value.code == 2

    def test_bad_dims(self):
        assert run(["deviation", "--d-model", "10", "--heads", "4"]) == 2

    def test_budget_list_outside_sweep(self):
        assert run(["deviation", *SMALL, "--budget", "4,8"]) == 2

    def test_unwritable_output(self, tmp_path):
        assert run(["deviation", *SMALL, "--policy", "h2o", "--caote", "off",
                    "--out", str(tmp_path / "missing" / "x.csv")]) == 2

    def test_missing_weights(self, tmp_path):
        assert run(["deviation", *SMALL, "--weights", str(tmp_path / "nope.json")]) == 2

    def test_weights_file(self, tmp_path):
        path = tmp_path / "w.json"
        save_weights(init_model(ModelConfig(1, 2, 8, 16, seed=99)), path)
        out = tmp_path / "o.csv"
        assert run(["deviation", "--weights", str(path), "--seq-len", "16", "--generate", "1",
                    "--seeds", "0", "--budget", "6", "--block", "4", "--policy", "tova",
                    "--caote", "full", "--out", str(out)]) == 0
        assert len(read_csv(out.read_text())) == 2
