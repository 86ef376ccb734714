import math
import os

import numpy as np
import pytest

from mmcl import Dataset, make_blobs, save_binary, save_csv
from mmcl.cli import main


def run_cli(capsys, *argv):
    code = main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


def write_blobs_config(path, out_dir, **extra):
    lines = {
        "data.kind": "blobs", "data.classes": 2, "data.per_class": 16,
        "data.dim": 6, "data.separation": 6.0,
        "model.backbone_widths": "8,8", "model.head_hidden": 8, "model.out_dim": 4,
        "batch_size": 8, "epochs": 1, "loss": "mmcl_inv",
        "solver.max_iters": 50, "eval.probe_epochs": 20,
        "out.metrics": str(out_dir / "metrics.csv"),
        "out.checkpoint": str(out_dir / "model.ckpt"),
    }
    lines.update(extra)
    path.write_text("".join(f"{k} = {v}\n" for k, v in lines.items()))


def parse_csv_blocks(text):
    """Split stdout into blank-line-separated CSV blocks of header+rows."""
    blocks = []
    for chunk in text.strip().split("\n\n"):
        rows = [line.split(",") for line in chunk.strip().splitlines()]
        blocks.append((rows[0], rows[1:]))
    return blocks


class TestTrainCommand:
    def test_one_epoch_writes_metrics_and_checkpoint(self, tmp_path, capsys):
        cfg = tmp_path / "blobs.cfg"
        write_blobs_config(cfg, tmp_path)
        code, _, _ = run_cli(capsys, "train", "--config", str(cfg))
        assert code == 0
        lines = (tmp_path / "metrics.csv").read_text().strip().splitlines()
        assert lines[0] == "epoch,C,sigma_sq,loss,knn_acc,linear_acc"
        assert len(lines) == 2  # header + 1 epoch
        assert (tmp_path / "model.ckpt").exists()

    def test_set_override(self, tmp_path, capsys):
        cfg = tmp_path / "blobs.cfg"
        write_blobs_config(cfg, tmp_path)
        code, _, _ = run_cli(capsys, "train", "--config", str(cfg), "--set", "epochs=2")
        assert code == 0
        assert len((tmp_path / "metrics.csv").read_text().strip().splitlines()) == 3

    def test_unknown_key_exits_2_naming_it(self, tmp_path, capsys):
        cfg = tmp_path / "blobs.cfg"
        write_blobs_config(cfg, tmp_path)
        code, _, err = run_cli(capsys, "train", "--config", str(cfg), "--set", "foo=1")
        assert code == 2
        assert "foo" in err

    def test_missing_config_exits_2(self, tmp_path, capsys):
        code, _, err = run_cli(capsys, "train", "--config", str(tmp_path / "nope.cfg"))
        assert code == 2

    def test_identical_runs_byte_identical_metrics(self, tmp_path, capsys):
        cfg = tmp_path / "blobs.cfg"
        outs = []
        for name in ("a", "b"):
            d = tmp_path / name
            d.mkdir()
            write_blobs_config(cfg, d, epochs=2)
            code, _, _ = run_cli(capsys, "train", "--config", str(cfg))
            assert code == 0
            outs.append((d / "metrics.csv").read_bytes())
        assert outs[0] == outs[1]


class TestSolveCommand:
    def test_scalar_instance_inv(self, tmp_path, capsys):
        inst = tmp_path / "inst.txt"
        inst.write_text("[k_xx]\n1.0\n[k_xY]\n1.0\n[K_YY]\n1.0\n")
        # delta = 1 + 1 - 1 - 1 + beta = beta; use beta=2 -> alpha = 2/2 = 1
        code, out, _ = run_cli(capsys, "solve", "--instance", str(inst),
                               "--solver", "inv", "--C", "100", "--beta", "2.0")
        assert code == 0
        blocks = parse_csv_blocks(out)
        header, rows = blocks[0]
        assert header[0] == "solver"
        assert float(rows[0][header.index("objective")]) == pytest.approx(-1.0, abs=1e-12)
        alpha_header, alpha_rows = blocks[1]
        assert float(alpha_rows[0][1]) == pytest.approx(1.0, abs=1e-12)

    def test_oracle_and_inv_agree_on_interior(self, tmp_path, capsys):
        inst = tmp_path / "inst.txt"
        # embeddings route: 3 orthogonal negatives, rbf kernel
        inst.write_text(
            "[kernel]\nkind = rbf\nsigma_sq = 1.0\n"
            "[z_pos]\n1.0,0.0,0.0\n"
            "[Z_neg]\n0.0,1.0,0.0\n0.0,0.0,1.0\n-1.0,0.0,0.0\n")
        results = {}
        for solver in ("oracle", "inv"):
            code, out, _ = run_cli(capsys, "solve", "--instance", str(inst),
                                   "--solver", solver, "--C", "100", "--beta", "0.1")
            assert code == 0
            header, rows = parse_csv_blocks(out)[0]
            results[solver] = float(rows[0][header.index("objective")])
        assert results["oracle"] == pytest.approx(results["inv"], abs=1e-8)

    def test_pgd_zero_budget(self, tmp_path, capsys):
        inst = tmp_path / "inst.txt"
        inst.write_text("[k_xY]\n0.0,0.0\n[K_YY]\n1.0,0.0\n0.0,1.0\n")
        code, out, _ = run_cli(capsys, "solve", "--instance", str(inst),
                               "--solver", "pgd", "--max-iters", "0", "--C", "0.5", "--beta", "0.1")
        assert code == 0
        header, rows = parse_csv_blocks(out)[0]
        assert rows[0][header.index("converged")] == "false"
        assert rows[0][header.index("iterations")] == "0"
        alphas = [float(r[1]) for r in parse_csv_blocks(out)[1][1]]
        assert all(0.0 <= a <= 0.5 for a in alphas)

    def test_malformed_instance_exits_2(self, tmp_path, capsys):
        inst = tmp_path / "bad.txt"
        inst.write_text("just some text\n")
        code, _, err = run_cli(capsys, "solve", "--instance", str(inst))
        assert code == 2

    def test_alpha_x_equals_alpha_sum(self, tmp_path, capsys):
        inst = tmp_path / "inst.txt"
        inst.write_text("[k_xY]\n0.2,0.1,0.4\n[K_YY]\n1,0,0\n0,1,0\n0,0,1\n")
        code, out, _ = run_cli(capsys, "solve", "--instance", str(inst),
                               "--solver", "oracle", "--C", "10", "--beta", "0.1")
        assert code == 0
        blocks = parse_csv_blocks(out)
        header, rows = blocks[0]
        alpha_x = float(rows[0][header.index("alpha_x")])
        total = sum(float(r[1]) for r in blocks[1][1])
        assert alpha_x == pytest.approx(total, abs=1e-12)


class TestEvalCommand:
    def _trained(self, tmp_path, capsys, **extra):
        cfg = tmp_path / "blobs.cfg"
        write_blobs_config(cfg, tmp_path, **extra)
        code, _, _ = run_cli(capsys, "train", "--config", str(cfg))
        assert code == 0
        ds = make_blobs(2, 16, 6, 6.0, seed=0)
        data_path = tmp_path / "data.mmd"
        save_binary(ds, data_path)
        return tmp_path / "model.ckpt", data_path

    def test_eval_prints_report(self, tmp_path, capsys):
        ckpt, data = self._trained(tmp_path, capsys)
        code, out, _ = run_cli(capsys, "eval", "--checkpoint", str(ckpt), "--data", str(data),
                               "--k", "3", "--probe-epochs", "30")
        assert code == 0
        header, rows = parse_csv_blocks(out)[0]
        assert header == ["knn_accuracy", "linear_accuracy", "k", "epochs_probe"]
        knn = float(rows[0][0])
        assert 0.0 <= knn <= 1.0

    def test_k_clipping_warns_but_succeeds(self, tmp_path, capsys):
        ckpt, data = self._trained(tmp_path, capsys)
        code, out, err = run_cli(capsys, "eval", "--checkpoint", str(ckpt), "--data", str(data),
                                 "--k", "5000", "--probe-epochs", "10")
        assert code == 0
        assert "clipp" in err.lower()

    def test_unlabeled_dataset_exits_2(self, tmp_path, capsys):
        ckpt, _ = self._trained(tmp_path, capsys)
        unlabeled = tmp_path / "unlabeled.csv"
        save_csv(Dataset(samples=np.random.default_rng(0).standard_normal((8, 6))), unlabeled)
        code, _, err = run_cli(capsys, "eval", "--checkpoint", str(ckpt), "--data", str(unlabeled))
        assert code == 2

    def test_repeat_runs_identical(self, tmp_path, capsys):
        ckpt, data = self._trained(tmp_path, capsys)
        outs = []
        for _ in range(2):
            code, out, _ = run_cli(capsys, "eval", "--checkpoint", str(ckpt), "--data", str(data),
                                   "--k", "3", "--probe-epochs", "30")
            assert code == 0
            outs.append(out)
        assert outs[0] == outs[1]


class TestInspectCommand:
    def _setup(self, tmp_path, capsys):
        cfg = tmp_path / "blobs.cfg"
        write_blobs_config(cfg, tmp_path, epochs=3)
        code, _, _ = run_cli(capsys, "train", "--config", str(cfg))
        assert code == 0
        ds = make_blobs(2, 16, 6, 6.0, seed=0)
        data_path = tmp_path / "data.mmd"
        save_binary(ds, data_path)
        return cfg, tmp_path / "model.ckpt", data_path

    def test_alpha_sums_to_header_alpha_x(self, tmp_path, capsys):
        cfg, ckpt, data = self._setup(tmp_path, capsys)
        code, out, _ = run_cli(capsys, "inspect", "--checkpoint", str(ckpt), "--data", str(data),
                               "--anchor", "3", "--batch-size", "8", "--config", str(cfg))
        assert code == 0
        blocks = parse_csv_blocks(out)
        header, rows = blocks[0]
        alpha_x = float(rows[0][header.index("alpha_x")])
        total = sum(float(r[2]) for r in blocks[1][1])
        assert alpha_x == pytest.approx(total, abs=1e-9)
        categories = {r[3] for r in blocks[1][1]}
        assert categories <= {"non-support", "support", "margin-violator"}

    def test_untrained_checkpoint_no_crash(self, tmp_path, capsys):
        cfg = tmp_path / "blobs.cfg"
        write_blobs_config(cfg, tmp_path, epochs=1, lr=0.0)
        code, _, _ = run_cli(capsys, "train", "--config", str(cfg))
        assert code == 0
        ds = make_blobs(2, 16, 6, 6.0, seed=0)
        data_path = tmp_path / "d.mmd"
        save_binary(ds, data_path)
        code, out, _ = run_cli(capsys, "inspect", "--checkpoint", str(tmp_path / "model.ckpt"),
                               "--data", str(data_path), "--anchor", "0", "--batch-size", "8")
        assert code == 0

    def test_anchor_out_of_range_exits_2(self, tmp_path, capsys):
        cfg, ckpt, data = self._setup(tmp_path, capsys)
        code, _, err = run_cli(capsys, "inspect", "--checkpoint", str(ckpt), "--data", str(data),
                               "--anchor", "99999", "--batch-size", "8")
        assert code == 2

    def test_all_anchors_export(self, tmp_path, capsys):
        cfg, ckpt, data = self._setup(tmp_path, capsys)
        code, out, _ = run_cli(capsys, "inspect", "--checkpoint", str(ckpt), "--data", str(data),
                               "--all-anchors", "--batch-size", "4", "--config", str(cfg))
        assert code == 0
        header, rows = parse_csv_blocks(out)[0]
        assert header == ["anchor_index", "negative_index", "alpha", "is_support", "is_margin_violator"]
        assert len(rows) == 4 * 6  # N anchors x 2(N-1) negatives


class TestBenchCommand:
    def test_one_row_per_size_and_variant(self, capsys):
        code, out, _ = run_cli(capsys, "bench", "--sizes", "2,4", "--reps", "1",
                               "--max-iters", "5", "--dim", "4")
        assert code == 0
        header, rows = parse_csv_blocks(out)[0]
        assert header == ["batch_size", "loss_variant", "ms_per_iter"]
        assert len(rows) == 2 * 3
        variants = {(r[0], r[1]) for r in rows}
        assert len(variants) == 6

    def test_bad_sizes_exit_2(self, capsys):
        code, _, _ = run_cli(capsys, "bench", "--sizes", "1,4")
        assert code == 2
