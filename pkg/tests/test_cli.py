"""End-to-end command surface: ingest round-trip, config validation, exit
codes, determinism, and the full synth -> train -> predict -> evaluate ->
classify -> analyze chain on a small fleet."""

import json
from pathlib import Path

import numpy as np
import pytest

from pimoe import dataio
from pimoe.cli import main
from pimoe.synthgen import ConditionSchedule, SynthConfig, gen_fleet


@pytest.fixture(scope="module")
def fleet_dir(tmp_path_factory):
    # long enough that SOH spans the early/mid/late buckets
    out = tmp_path_factory.mktemp("fleet")
    fleet = gen_fleet(
        SynthConfig(
            n_batteries=4,
            seed=5,
            max_cycles=185,
            schedule=ConditionSchedule(mode="fixed", conditions=((0.5, 1.0, 25.0),)),
        )
    )
    dataio.write_dataset(fleet.dataset, out)
    dataio.write_stage_labels(fleet.stage_labels, out / "stages.csv")
    return out


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory, fleet_dir):
    out = tmp_path_factory.mktemp("run")
    config = {
        "seed": 0,
        "data_dir": str(fleet_dir),
        "out_dir": str(out),
        "split": {"val_fraction": 0.25, "test_fraction": 0.25},
        "train": {
            "horizon": 8,
            "epochs": 4,
            "batch_size": 32,
            "hidden_dim": 16,
            "n_experts": 3,
            "top_k": 2,
        },
        "prep": {"v_start": {"policy": "fixed", "voltage_v": 3.5}},
    }
    cfg_path = out / "train.json"
    cfg_path.write_text(json.dumps(config))
    assert main(["train", "--config", str(cfg_path)]) == 0
    return out


class TestDataIO:
    def test_round_trip_emit_ingest(self, tmp_path):
        fleet = gen_fleet(SynthConfig(n_batteries=2, seed=9, max_cycles=12))
        ds = fleet.dataset
        out = tmp_path / "ds"
        dataio.write_dataset(ds, out)
        back = dataio.read_dataset_dir(out)
        assert back.battery_ids() == ds.battery_ids()
        for b0, b1 in zip(ds.batteries, back.batteries):
            assert b1.chemistry == b0.chemistry
            assert b1.nominal_capacity_mah == b0.nominal_capacity_mah
            assert b1.cutoff_voltage_v == b0.cutoff_voltage_v
            for c0, c1 in zip(b0.cycles, b1.cycles):
                np.testing.assert_array_equal(c1.charge_t_s, c0.charge_t_s)
                np.testing.assert_array_equal(c1.charge_v, c0.charge_v)
                np.testing.assert_array_equal(c1.charge_i_a, c0.charge_i_a)
                np.testing.assert_array_equal(c1.relax_v, c0.relax_v)
                assert c1.max_discharge_capacity_mah == c0.max_discharge_capacity_mah
                assert c1.condition == c0.condition
                # cumulative charge is reconstructed by integration
                np.testing.assert_allclose(
                    c1.charge_q_mah, c0.charge_q_mah, atol=1e-9, rtol=1e-12
                )

    def test_stage_labels_round_trip(self, tmp_path):
        fleet = gen_fleet(SynthConfig(n_batteries=2, seed=9, max_cycles=12))
        path = dataio.write_stage_labels(fleet.stage_labels, tmp_path / "stages.csv")
        back = dataio.read_stage_labels(path)
        for bid, stages in fleet.stage_labels.items():
            np.testing.assert_array_equal(back[bid], stages)

    def test_row_numbered_errors(self, tmp_path):
        cycles = tmp_path / "cycles.csv"
        summary = tmp_path / "summary.csv"
        cycles.write_text(
            "battery_id,cycle,phase,t_s,voltage_v,current_a\n"
            "b0,1,charge,0.0,3.0,1.0\n"
            "b0,1,charge,1.0,notanumber,1.0\n"
        )
        summary.write_text(
            "battery_id,cycle,max_discharge_capacity_mAh,charge_c,discharge_c,temp_c\n"
            "b0,1,3000,0.5,1,25\n"
        )
        from pimoe.errors import IngestError

        with pytest.raises(IngestError) as exc:
            dataio.read_dataset(cycles, summary)
        assert "row 3" in str(exc.value)

    def test_empty_cycles_rejected(self, tmp_path):
        cycles = tmp_path / "cycles.csv"
        summary = tmp_path / "summary.csv"
        cycles.write_text("battery_id,cycle,phase,t_s,voltage_v,current_a\n")
        summary.write_text(
            "battery_id,cycle,max_discharge_capacity_mAh,charge_c,discharge_c,temp_c\n"
        )
        from pimoe.errors import IngestError

        with pytest.raises(IngestError):
            dataio.read_dataset(cycles, summary)

    def test_summary_join_enforced(self, tmp_path):
        cycles = tmp_path / "cycles.csv"
        summary = tmp_path / "summary.csv"
        cycles.write_text(
            "battery_id,cycle,phase,t_s,voltage_v,current_a\n"
            "b0,1,charge,0.0,3.0,1.0\nb0,1,charge,1.0,3.1,1.0\n"
        )
        summary.write_text(
            "battery_id,cycle,max_discharge_capacity_mAh,charge_c,discharge_c,temp_c\n"
            "b0,2,3000,0.5,1,25\n"
        )
        from pimoe.errors import IngestError

        with pytest.raises(IngestError):
            dataio.read_dataset(cycles, summary)

    def test_conditions_file(self, tmp_path):
        path = tmp_path / "conditions.csv"
        path.write_text(
            "step,charge_c,discharge_c,temp_c\n1,1.0,2.0,25\n2,2.0,2.0,25\n3,3.0,2.0,25\n"
        )
        conds = dataio.read_conditions_file(path)
        assert conds.shape == (3, 3)
        np.testing.assert_array_equal(conds[2], [3.0, 2.0, 25.0])


class TestSynthIngestCli:
    def test_synth_then_ingest_round_trip(self, tmp_path):
        synth_out = tmp_path / "raw"
        cfg = {"seed": 11, "out_dir": str(synth_out), "n_batteries": 2, "max_cycles": 12}
        cfg_path = tmp_path / "synth.json"
        cfg_path.write_text(json.dumps(cfg))
        assert main(["synth", "--config", str(cfg_path)]) == 0
        assert (synth_out / "cycles.csv").exists()
        assert (synth_out / "stages.csv").exists()

        archive = tmp_path / "archive"
        code = main(
            [
                "ingest",
                "--cycles", str(synth_out / "cycles.csv"),
                "--summary", str(synth_out / "summary.csv"),
                "--meta", str(synth_out / "meta.json"),
                "--out", str(archive),
            ]
        )
        assert code == 0
        manifest = json.loads((archive / "manifest.json").read_text())
        assert manifest["n_batteries"] == 2
        assert all(v == [] for v in manifest["removed"].values())
        back = dataio.read_dataset_dir(archive)
        original = dataio.read_dataset_dir(synth_out)
        for b0, b1 in zip(original.batteries, back.batteries):
            np.testing.assert_array_equal(b0.capacities(), b1.capacities())

    def test_synth_config_rejects_unknown_keys(self, tmp_path):
        cfg_path = tmp_path / "synth.json"
        cfg_path.write_text(json.dumps({"seed": 1, "out_dir": "x", "bogus": 3}))
        assert main(["synth", "--config", str(cfg_path)]) == 2
        assert not Path("x").exists()  # nothing partially executed

    def test_missing_config_file(self):
        assert main(["synth", "--config", "/nonexistent/conf.json"]) == 2

    def test_ingest_missing_file_is_data_error(self, tmp_path):
        assert (
            main(
                [
                    "ingest",
                    "--cycles", str(tmp_path / "no.csv"),
                    "--summary", str(tmp_path / "no2.csv"),
                    "--out", str(tmp_path / "out"),
                ]
            )
            == 3
        )


class TestTrainPredictEvaluateCli:
    def test_train_outputs(self, trained_dir):
        assert (trained_dir / "model.ckpt").exists()
        assert (trained_dir / "train_log.jsonl").exists()
        assert (trained_dir / "split.json").exists()
        assert (trained_dir / "training_curves.png").exists()
        log_lines = (trained_dir / "train_log.jsonl").read_text().strip().splitlines()
        recs = [json.loads(line) for line in log_lines]
        assert any("train_loss" in r for r in recs)
        assert not any("ms" in key for r in recs for key in r)

    def test_train_log_deterministic_rerun(self, tmp_path, fleet_dir, trained_dir):
        out2 = tmp_path / "rerun"
        config = json.loads((trained_dir / "train.json").read_text())
        config["out_dir"] = str(out2)
        cfg_path = tmp_path / "train2.json"
        cfg_path.write_text(json.dumps(config))
        assert main(["train", "--config", str(cfg_path)]) == 0
        assert (out2 / "train_log.jsonl").read_bytes() == (
            trained_dir / "train_log.jsonl"
        ).read_bytes()
        assert (out2 / "split.json").read_bytes() == (trained_dir / "split.json").read_bytes()

    def test_env_seed_override_changes_split(self, tmp_path, trained_dir, monkeypatch):
        out2 = tmp_path / "enveq"
        config = json.loads((trained_dir / "train.json").read_text())
        config["out_dir"] = str(out2)
        config["train"]["epochs"] = 1
        cfg_path = tmp_path / "train3.json"
        cfg_path.write_text(json.dumps(config))
        monkeypatch.setenv("PIMOE_SEED", "99")
        assert main(["train", "--config", str(cfg_path)]) == 0
        monkeypatch.delenv("PIMOE_SEED")
        s1 = json.loads((trained_dir / "split.json").read_text())
        s2 = json.loads((out2 / "split.json").read_text())
        assert s1["train_ids"] != s2["train_ids"] or s1["test_ids"] != s2["test_ids"]

    def test_bad_env_seed_is_config_error(self, tmp_path, trained_dir, monkeypatch):
        config = json.loads((trained_dir / "train.json").read_text())
        cfg_path = tmp_path / "train4.json"
        cfg_path.write_text(json.dumps(config))
        monkeypatch.setenv("PIMOE_SEED", "notanint")
        assert main(["train", "--config", str(cfg_path)]) == 2

    def test_train_config_unknown_key_rejected(self, tmp_path, fleet_dir):
        cfg = {
            "seed": 0,
            "data_dir": str(fleet_dir),
            "out_dir": str(tmp_path / "o"),
            "train": {"horizon": 8, "mystery": True},
        }
        cfg_path = tmp_path / "bad.json"
        cfg_path.write_text(json.dumps(cfg))
        assert main(["train", "--config", str(cfg_path)]) == 2

    def test_predict_outputs_and_determinism(self, tmp_path, fleet_dir, trained_dir):
        out = tmp_path / "pred"
        args = [
            "predict",
            "--checkpoint", str(trained_dir / "model.ckpt"),
            "--data", str(fleet_dir),
            "--out", str(out),
            "--anchor-cycle", "20",
            "--timing-repeats", "3",
        ]
        assert main(args) == 0
        first = (out / "trajectories.csv").read_bytes()
        timing = json.loads((out / "timing.json").read_text())
        assert timing["repeats"] == 3
        assert timing["median_ms"] > 0
        assert (out / "trajectories.png").exists()
        # rerun: trajectory bytes identical, timing free to differ
        assert main(args) == 0
        assert (out / "trajectories.csv").read_bytes() == first
        rows = first.decode().strip().splitlines()
        assert rows[0] == "battery_id,anchor_cycle,future_cycle,predicted_mah,actual_mah"
        # anchored mid-series, actual values are present
        assert rows[1].split(",")[4] != ""

    def test_predict_horizon_override(self, tmp_path, fleet_dir, trained_dir):
        out = tmp_path / "pred150"
        assert (
            main(
                [
                    "predict",
                    "--checkpoint", str(trained_dir / "model.ckpt"),
                    "--data", str(fleet_dir),
                    "--out", str(out),
                    "--horizon", "20",
                    "--battery", "synth000",
                ]
            )
            == 0
        )
        rows = (out / "trajectories.csv").read_text().strip().splitlines()
        assert len(rows) == 1 + 20

    def test_predict_with_conditions_file(self, tmp_path, fleet_dir, trained_dir):
        cond_path = tmp_path / "conditions.csv"
        lines = ["step,charge_c,discharge_c,temp_c"]
        lines += [f"{i + 1},1.0,1.0,25" for i in range(8)]
        cond_path.write_text("\n".join(lines) + "\n")
        out = tmp_path / "predc"
        assert (
            main(
                [
                    "predict",
                    "--checkpoint", str(trained_dir / "model.ckpt"),
                    "--data", str(fleet_dir),
                    "--out", str(out),
                    "--conditions", str(cond_path),
                ]
            )
            == 0
        )

    def test_evaluate_report_and_aggregation_oracle(self, tmp_path, fleet_dir, trained_dir):
        out = tmp_path / "eval"
        assert (
            main(
                [
                    "evaluate",
                    "--checkpoint", str(trained_dir / "model.ckpt"),
                    "--data", str(fleet_dir),
                    "--out", str(out),
                    "--split", str(trained_dir / "split.json"),
                ]
            )
            == 0
        )
        report = json.loads((out / "report.json").read_text())
        assert "latency" not in report
        assert (out / "timing.json").exists()
        assert (out / "condition_metrics.png").exists()
        # aggregates equal recomputation from per-battery rows
        for cond in report["per_condition"]:
            rows = [
                r for r in report["per_battery"] if r["condition_tag"] == cond["condition_tag"]
            ]
            assert cond["n_batteries"] == len(rows)
            assert cond["mape_percent"] == pytest.approx(
                np.mean([r["mape_percent"] for r in rows]), rel=1e-12
            )
        # rerun determinism on report bytes
        body = (out / "report.json").read_bytes()
        assert main(
            [
                "evaluate",
                "--checkpoint", str(trained_dir / "model.ckpt"),
                "--data", str(fleet_dir),
                "--out", str(out),
                "--split", str(trained_dir / "split.json"),
            ]
        ) == 0
        assert (out / "report.json").read_bytes() == body

    def test_classify_outputs(self, tmp_path, fleet_dir, trained_dir):
        out = tmp_path / "cls"
        assert (
            main(
                [
                    "classify",
                    "--checkpoint", str(trained_dir / "model.ckpt"),
                    "--data", str(fleet_dir),
                    "--out", str(out),
                ]
            )
            == 0
        )
        assert (out / "labels.csv").exists()
        assert (out / "confidence.csv").exists()
        assert (out / "stage_map.json").exists()
        rows = (out / "labels.csv").read_text().strip().splitlines()
        assert rows[0].startswith("battery_id,soh_bucket,label,dominant_expert")

    def test_analyze_outputs(self, tmp_path, fleet_dir, trained_dir):
        out = tmp_path / "ana"
        assert (
            main(
                [
                    "analyze",
                    "--checkpoint", str(trained_dir / "model.ckpt"),
                    "--data", str(fleet_dir),
                    "--out", str(out),
                    "--split", str(trained_dir / "split.json"),
                    "--iters", "60",
                    "--perplexity", "8",
                ]
            )
            == 0
        )
        gate_rows = (out / "gate_weights.csv").read_text().strip().splitlines()
        header = gate_rows[0].split(",")
        assert header == ["sample_id", "stage", "w1", "w2", "w3"]
        weights = np.array(
            [[float(v) for v in row.split(",")[2:]] for row in gate_rows[1:]]
        )
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-8)
        tsne_rows = (out / "tsne.csv").read_text().strip().splitlines()
        assert tsne_rows[0] == "sample_id,x,y,stage"
        assert len(tsne_rows) == len(gate_rows)
        for name in ("gate_heatmap.png", "tsne.png", "trend_embeddings.png", "tsne_meta.json"):
            assert (out / name).exists()

    def test_missing_checkpoint_is_data_error(self, tmp_path, fleet_dir):
        assert (
            main(
                [
                    "predict",
                    "--checkpoint", str(tmp_path / "none.ckpt"),
                    "--data", str(fleet_dir),
                    "--out", str(tmp_path / "x"),
                ]
            )
            == 3
        )
