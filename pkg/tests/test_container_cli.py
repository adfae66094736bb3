import json

import numpy as np
import pytest

from csnn import container
from csnn.cli import main
from csnn.container import ContainerError
from csnn.network import (
    GSC_INPUT_SHAPE,
    GscPlan,
    build_gsc_network,
    gsc_specs,
    infer,
    plan_to_dict,
)
from csnn.packing import unpack

from helpers import random_int8, random_kernels


@pytest.fixture(scope="module")
def gsc_model():
    return build_gsc_network(GscPlan.sparse(), seed=11)


class TestContainer:
    def test_roundtrip_preserves_inference(self, gsc_model, tmp_path):
        path = tmp_path / "model.csnn"
        container.save(gsc_model, path)
        loaded = container.load(path)
        frame = random_int8(np.random.default_rng(0), (32, 32, 1))
        a = infer(gsc_model, frame, "sparse-sparse")
        b = infer(loaded, frame, "sparse-sparse")
        assert np.array_equal(a.logits, b.logits)
        assert a.report.to_dict() == b.report.to_dict()

    def test_roundtrip_preserves_packing(self, gsc_model, tmp_path):
        path = tmp_path / "model.csnn"
        container.save(gsc_model, path)
        loaded = container.load(path)
        for mine, theirs in zip(gsc_model.layers, loaded.layers):
            if hasattr(mine, "awt"):
                assert unpack(mine.awt) == unpack(theirs.awt)

    def test_save_is_deterministic(self, gsc_model, tmp_path):
        a, b = tmp_path / "a.csnn", tmp_path / "b.csnn"
        container.save(gsc_model, a)
        container.save(gsc_model, b)
        assert a.read_bytes() == b.read_bytes()

    def test_crc_corruption_detected(self, gsc_model, tmp_path):
        path = tmp_path / "model.csnn"
        container.save(gsc_model, path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(ContainerError, match="CRC"):
            container.load(path)

    def test_truncation_detected(self, gsc_model, tmp_path):
        path = tmp_path / "model.csnn"
        container.save(gsc_model, path)
        path.write_bytes(path.read_bytes()[:100])
        with pytest.raises(ContainerError):
            container.load(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "nope.csnn"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ContainerError):
            container.load(path)


def run_cli(*argv):
    return main([str(a) for a in argv])


class TestCliGenSynthetic:
    def test_same_seed_byte_identical(self, tmp_path):
        plan = tmp_path / "plan.json"
        plan.write_text(json.dumps(plan_to_dict(GSC_INPUT_SHAPE, gsc_specs(GscPlan.sparse()))))
        for name in ("one", "two"):
            assert run_cli(
                "gen-synthetic", "--plan", plan, "--seed", 5, "--out", tmp_path / name,
                "--frames", 2,
            ) == 0
        assert (tmp_path / "one.csnn").read_bytes() == (tmp_path / "two.csnn").read_bytes()

    def test_different_seed_differs(self, tmp_path):
        for seed, name in ((1, "a"), (2, "b")):
            run_cli("gen-synthetic", "--seed", seed, "--out", tmp_path / name, "--frames", 1)
        assert (tmp_path / "a.csnn").read_bytes() != (tmp_path / "b.csnn").read_bytes()


class TestCliPack:
    def write_single_layer_assets(self, tmp_path, n_kernels=20, n=5, collide=False):
        plan = {
            "input_shape": [5, 5, 1],
            "layers": [
                {"kind": "flatten", "name": "flat"},
                {"kind": "linear", "name": "fc", "out_features": n_kernels, "shift": None},
            ],
        }
        plan_path = tmp_path / "plan.json"
        plan_path.write_text(json.dumps(plan))
        kernels = random_kernels((25,), n, n_kernels, seed=3)
        masks = np.zeros((n_kernels, 25), bool)
        weights = np.zeros((n_kernels, 25), np.int8)
        for k in kernels:
            masks[k.kernel_id, k.positions] = True
            weights[k.kernel_id, k.positions] = k.weights
        if collide:
            masks[1] = masks[0]
            weights[1] = weights[0]
        np.savez(tmp_path / "masks.npz", fc=masks)
        np.savez(tmp_path / "weights.npz", fc=weights)
        return plan_path

    def test_pack_summary_and_roundtrip(self, tmp_path, capsys):
        plan_path = self.write_single_layer_assets(tmp_path)
        out = tmp_path / "model.csnn"
        code = run_cli(
            "pack", "--plan", plan_path, "--masks", tmp_path / "masks.npz",
            "--weights", tmp_path / "weights.npz", "--out", out,
        )
        assert code == 0
        captured = capsys.readouterr().out
        assert "4 sets x 5 kernels" in captured
        loaded = container.load(out)
        kernels = random_kernels((25,), 5, 20, seed=3)
        assert unpack(loaded.layers[1].awt) == kernels

    def test_pack_collision_reports_and_fails(self, tmp_path, capsys):
        plan_path = self.write_single_layer_assets(tmp_path, collide=True)
        code = run_cli(
            "pack", "--plan", plan_path, "--masks", tmp_path / "masks.npz",
            "--weights", tmp_path / "weights.npz", "--out", tmp_path / "model.csnn",
        )
        assert code == 2
        err = capsys.readouterr().err
        assert "complementarity violations" in err
        assert "kernels (0, 1)" in err

    def test_pack_empty_mask_file(self, tmp_path):
        np.savez(tmp_path / "masks.npz")
        np.savez(tmp_path / "weights.npz")
        code = run_cli(
            "pack", "--masks", tmp_path / "masks.npz",
            "--weights", tmp_path / "weights.npz", "--out", tmp_path / "model.csnn",
        )
        assert code == 2

    def test_pack_gsc_weights_roundtrip(self, tmp_path):
        model = build_gsc_network(GscPlan.sparse(), seed=12)
        masks, weights = {}, {}
        for layer in model.layers:
            if not hasattr(layer, "awt"):
                continue
            kernels = unpack(layer.awt)
            shape = kernels[0].shape
            m = np.zeros((len(kernels), *shape), bool)
            w = np.zeros((len(kernels), *shape), np.int8)
            for k in kernels:
                m[k.kernel_id].reshape(-1)[k.positions] = True
                w[k.kernel_id].reshape(-1)[k.positions] = k.weights
            masks[layer.name] = m
            weights[layer.name] = w
            if layer.bias is not None:
                weights[f"{layer.name}.bias"] = layer.bias
        np.savez(tmp_path / "masks.npz", **masks)
        np.savez(tmp_path / "weights.npz", **weights)
        out = tmp_path / "packed.csnn"
        assert run_cli(
            "pack", "--masks", tmp_path / "masks.npz", "--weights", tmp_path / "weights.npz",
            "--out", out,
        ) == 0
        loaded = container.load(out)
        frame = random_int8(np.random.default_rng(9), (32, 32, 1))
        assert np.array_equal(
            infer(model, frame, "sparse-sparse").logits,
            infer(loaded, frame, "sparse-sparse").logits,
        )


@pytest.fixture(scope="module")
def assets(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("infer")
    run_cli("gen-synthetic", "--seed", 4, "--out", tmp / "m", "--frames", 2)
    return tmp


@pytest.fixture(scope="module")
def model_path(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("bench")
    run_cli("gen-synthetic", "--seed", 6, "--out", tmp / "m", "--frames", 1)
    return tmp / "m.csnn"


class TestCliInfer:
    def test_infer_prints_logits_and_report(self, assets, capsys):
        report = assets / "report.csv"
        code = run_cli(
            "infer", "--model", assets / "m.csnn", "--input", assets / "m.frames.bin",
            "--report", report,
        )
        assert code == 0
        out = capsys.readouterr().out
        assert "frame 0: class=" in out
        lines = report.read_text().splitlines()
        assert lines[0] == "layer,kind,dense_macs,executed_mults,executed_adds,ratio"
        assert lines[-1].startswith("TOTAL")

    def test_default_plan_mac_ratio_below_1_2_percent(self, assets):
        report = assets / "ratio.csv"
        assert run_cli(
            "infer", "--model", assets / "m.csnn", "--input", assets / "m.frames.bin",
            "--report", report,
        ) == 0
        total = report.read_text().splitlines()[-1].split(",")
        assert total[0] == "TOTAL"
        assert float(total[-1]) < 0.012

    def test_infer_modes_agree(self, assets, capsys):
        outputs = {}
        for mode in ("sparse-sparse", "dense"):
            run_cli(
                "infer", "--model", assets / "m.csnn", "--input", assets / "m.frames.bin",
                "--mode", mode,
            )
            outputs[mode] = [
                line for line in capsys.readouterr().out.splitlines() if line.startswith("frame")
            ]
        assert outputs["sparse-sparse"] == outputs["dense"]

    def test_corrupt_model_exits_2(self, assets, tmp_path):
        blob = bytearray((assets / "m.csnn").read_bytes())
        blob[-1] ^= 0x01
        bad = tmp_path / "bad.csnn"
        bad.write_bytes(bytes(blob))
        assert run_cli("infer", "--model", bad, "--input", assets / "m.frames.bin") == 2

    def test_wrong_frame_size_exits_2(self, assets, tmp_path):
        short = tmp_path / "short.bin"
        short.write_bytes(b"\x01" * 100)
        assert run_cli("infer", "--model", assets / "m.csnn", "--input", short) == 2


class TestCliBench:
    def test_zero_frames(self, model_path, tmp_path):
        out = tmp_path / "bench.json"
        assert run_cli("bench", "--model", model_path, "--frames", 0, "--out", out) == 0
        data = json.loads(out.read_text())
        assert data["throughput_ips"] == 0.0
        assert data["instances"] == 1
        assert data["per_layer_latency_us"] == {}

    def test_replication_never_changes_results(self, model_path, tmp_path):
        results = []
        for r in (1, 3):
            out = tmp_path / f"bench{r}.json"
            assert run_cli(
                "bench", "--model", model_path, "--frames", 6, "--instances", r, "--out", out,
            ) == 0
            results.append(json.loads(out.read_text()))
        assert results[0]["logits_crc32"] == results[1]["logits_crc32"]
        assert results[0]["mac_report"] == results[1]["mac_report"]
        assert results[1]["instances"] == 3
        assert results[0]["throughput_ips"] > 0

    def test_cs_threads_cap(self, model_path, tmp_path, monkeypatch):
        monkeypatch.setenv("CS_THREADS", "1")
        out = tmp_path / "bench.json"
        assert run_cli(
            "bench", "--model", model_path, "--frames", 4, "--instances", 4, "--out", out,
        ) == 0
        assert json.loads(out.read_text())["instances"] == 4

    def test_repeating_stream_longer_than_frame_pool(self, model_path, tmp_path):
        # the frame pool repeats; rerunning the stream reproduces the logits
        crcs = []
        for tag in ("x", "y"):
            out = tmp_path / f"{tag}.json"
            assert run_cli(
                "bench", "--model", model_path, "--frames", 130, "--instances", 2,
                "--out", out,
            ) == 0
            crcs.append(json.loads(out.read_text())["logits_crc32"])
        assert crcs[0] == crcs[1]


class TestCliGenSyntheticAccounting:
    def test_dense_plan_reports_reference_parameter_count(self, tmp_path, capsys):
        plan = tmp_path / "dense.json"
        plan.write_text(json.dumps(plan_to_dict(GSC_INPUT_SHAPE, gsc_specs(GscPlan.dense()))))
        assert run_cli(
            "gen-synthetic", "--plan", plan, "--seed", 1, "--out", tmp_path / "dense",
            "--frames", 1,
        ) == 0
        assert "dense 2522128" in capsys.readouterr().out

    def test_allocation_plan_reports_its_nonzero_total(self, tmp_path, capsys):
        with open("configs/gsc_allocation_127696.json") as fh:
            alloc = json.load(fh)
        plan_dict = plan_to_dict(GSC_INPUT_SHAPE, gsc_specs(GscPlan.from_allocation(alloc)))
        plan = tmp_path / "alloc.json"
        plan.write_text(json.dumps(plan_dict))
        assert run_cli(
            "gen-synthetic", "--plan", plan, "--seed", 1, "--out", tmp_path / "alloc",
            "--frames", 1,
        ) == 0
        assert "packed nonzero 127696" in capsys.readouterr().out


class TestCliResources:
    def test_reference_numbers(self, capsys):
        assert run_cli(
            "resources", "--c-in", 64, "--c-out", 64, "--n", 4, "--k", 8, "--bid", 6,
        ) == 0
        data = json.loads(capsys.readouterr().out)
        assert data["ports"] == 8
        assert data["port_width_bits"] == 56
        assert data["total_bandwidth_bits_per_cycle"] == 448

    def test_non_positive_exits_2(self):
        assert run_cli("resources", "--c-in", 0, "--c-out", 64, "--n", 4, "--k", 8) == 2


class TestExitCodes:
    def test_missing_required_argument_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("infer", "--model", "x.csnn")
        assert exc.value.code == 1

    def test_unknown_command_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            run_cli("frobnicate")
        assert exc.value.code == 1

    def test_missing_model_file_is_data_error(self, tmp_path):
        assert run_cli("infer", "--model", tmp_path / "no.csnn", "--input", tmp_path / "no.bin") == 2
