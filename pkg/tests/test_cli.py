import json

import numpy as np
import pytest

from lagp.cli import main
from lagp.serialize import load_state

TOY_BASE = """
seed = 0
dataset.kind = toy1d
dataset.n = 60
dataset.seed = 1
split.fractions = 0.7,0.15,0.15
split.shuffle = 0
arch.hidden = 8
train.iterations = 600
train.batch_size = 42
train.learning_rate = 0.01
method.prior_variance = 0.5
method.noise_variance = 0.01
method.inducing = 5
method.iterations = 150
method.batch_size = 42
method.learning_rate = 0.02
method.validate_every = 50
"""


def write_config(tmp_path, name, extra):
    path = tmp_path / name
    path.write_text(TOY_BASE + extra)
    return path


def train_checkpoint(tmp_path, run_name="map_run"):
    cfg = write_config(tmp_path, "train.cfg", f"output_dir = {tmp_path / run_name}\n")
    assert main(["train-map", str(cfg)]) == 0
    return tmp_path / run_name / "checkpoint.bin"


class TestShowDefaults:
    def test_runs(self, capsys):
        assert main(["show-defaults"]) == 0
        out = capsys.readouterr().out
        assert "method = valla" in out
        assert "dataset.kind" in out


class TestTrainMap:
    def test_writes_checkpoint_and_log(self, tmp_path):
        cfg = write_config(tmp_path, "t.cfg", f"output_dir = {tmp_path / 'run'}\n")
        assert main(["train-map", str(cfg)]) == 0
        out = tmp_path / "run"
        assert (out / "checkpoint.bin").exists()
        lines = (out / "train_log.csv").read_text().strip().splitlines()
        assert lines[0] == "iteration,loss"
        assert len(lines) == 1 + 600 // 100
        assert (out / "config.txt").exists()

    def test_rerun_bitwise_identical(self, tmp_path):
        cfg1 = write_config(tmp_path, "a.cfg", f"output_dir = {tmp_path / 'a'}\n")
        cfg2 = write_config(tmp_path, "b.cfg", f"output_dir = {tmp_path / 'b'}\n")
        assert main(["train-map", str(cfg1)]) == 0
        assert main(["train-map", str(cfg2)]) == 0
        a = (tmp_path / "a" / "checkpoint.bin").read_bytes()
        b = (tmp_path / "b" / "checkpoint.bin").read_bytes()
        assert a == b

    def test_missing_dataset_path_exits_2(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("dataset.kind = csv\ndataset.path = missing.csv\n")
        assert main(["train-map", str(cfg)]) == 2

    def test_unknown_key_exits_2(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("no.such.key = 1\n")
        assert main(["train-map", str(cfg)]) == 2


class TestFit:
    def test_valla_fit_writes_state_and_log(self, tmp_path):
        checkpoint = train_checkpoint(tmp_path)
        cfg = write_config(
            tmp_path, "fit.cfg", f"output_dir = {tmp_path / 'fit_run'}\nmethod = valla\n"
        )
        assert main(["fit", str(cfg), "--checkpoint", str(checkpoint)]) == 0
        out = tmp_path / "fit_run"
        assert (out / "state_valla.bin").exists()
        header = (out / "fit_log_valla.csv").read_text().splitlines()[0]
        assert header == "iteration,objective,kl,data_term,validation_nll"
        assert (out / "timing.json").exists()

    def test_exact_cap_exceeded_mentions_alternative(self, tmp_path, capsys):
        checkpoint = train_checkpoint(tmp_path)
        big = TOY_BASE.replace("dataset.n = 60", "dataset.n = 9000")
        cfg = tmp_path / "cap.cfg"
        cfg.write_text(big + f"output_dir = {tmp_path / 'cap_run'}\nmethod = lla_exact\n")
        code = main(["fit", str(cfg), "--checkpoint", str(checkpoint)])
        assert code == 1
        assert "valla" in capsys.readouterr().err

    def test_unknown_method_exits_2(self, tmp_path, capsys):
        checkpoint = train_checkpoint(tmp_path)
        cfg = write_config(
            tmp_path, "um.cfg", f"output_dir = {tmp_path / 'um'}\nmethod = bogus\n"
        )
        assert main(["fit", str(cfg), "--checkpoint", str(checkpoint)]) == 2
        assert "lla_exact" in capsys.readouterr().err

    def test_missing_checkpoint_exits_2(self, tmp_path):
        cfg = write_config(tmp_path, "mc.cfg", f"output_dir = {tmp_path / 'mc'}\n")
        assert main(["fit", str(cfg), "--checkpoint", str(tmp_path / "nope.bin")]) == 2

    def test_determinism_across_reruns(self, tmp_path):
        checkpoint = train_checkpoint(tmp_path)
        outs = []
        for name in ("d1", "d2"):
            cfg = write_config(
                tmp_path, f"{name}.cfg", f"output_dir = {tmp_path / name}\nmethod = valla\n"
            )
            assert main(["fit", str(cfg), "--checkpoint", str(checkpoint)]) == 0
            outs.append(tmp_path / name)
        # everything except the timing file and the config copies (which
        # embed the differing output paths) must match byte for byte
        for fname in ("state_valla.bin", "fit_log_valla.csv", "fit_info_valla.json"):
            assert (outs[0] / fname).read_bytes() == (outs[1] / fname).read_bytes()


METRICS_SCHEMA = {
    "type": "object",
    "properties": {
        "n_points": {"type": "integer", "minimum": 1},
        "nll": {"type": "number"},
        "crps": {"type": "number", "minimum": 0},
        "cqm": {"type": "number", "minimum": 0, "maximum": 0.5},
        "acc": {"type": "number", "minimum": 0, "maximum": 1},
        "ece": {"type": "number", "minimum": 0, "maximum": 1},
        "brier": {"type": "number", "minimum": 0},
    },
    "required": ["n_points", "nll"],
    "additionalProperties": False,
}


class TestEvaluate:
    def fit_state(self, tmp_path, method="lla_exact"):
        checkpoint = train_checkpoint(tmp_path)
        cfg = write_config(
            tmp_path, "ev.cfg", f"output_dir = {tmp_path / 'ev'}\nmethod = {method}\n"
        )
        assert main(["fit", str(cfg), "--checkpoint", str(checkpoint)]) == 0
        return cfg, tmp_path / "ev" / f"state_{method}.bin"

    def test_regression_metrics_and_schema(self, tmp_path):
        import jsonschema

        cfg, state = self.fit_state(tmp_path)
        assert main(["evaluate", str(cfg), "--state", str(state), "--split", "test"]) == 0
        payload = json.loads((tmp_path / "ev" / "metrics_test.json").read_text())
        jsonschema.validate(payload, METRICS_SCHEMA)
        assert set(payload) >= {"nll", "crps", "cqm", "n_points"}
        coverage = (tmp_path / "ev" / "coverage_test.csv").read_text().splitlines()
        assert coverage[0] == "alpha,coverage"
        assert len(coverage) == 1 + 11

    def test_train_split_nll_is_small(self, tmp_path):
        cfg, state = self.fit_state(tmp_path)
        assert main(["evaluate", str(cfg), "--state", str(state), "--split", "train"]) == 0
        payload = json.loads((tmp_path / "ev" / "metrics_train.json").read_text())
        assert payload["nll"] < 0.5

    def test_ood_mode(self, tmp_path, capsys):
        a = tmp_path / "in.csv"
        b = tmp_path / "out.csv"
        a.write_text("entropy\n0.1\n0.2\n0.3\n")
        b.write_text("entropy\n0.9\n1.1\n")
        assert main(["evaluate", "--ood-in", str(a), "--ood-out", str(b)]) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload == {"ood_auc": 1.0}

    def test_missing_state_exits_2(self, tmp_path):
        cfg = write_config(tmp_path, "ms.cfg", f"output_dir = {tmp_path / 'ms'}\n")
        assert main(["evaluate", str(cfg), "--state", str(tmp_path / "none.bin")]) == 2


class TestPredictGrid:
    def test_grid_csv_contract(self, tmp_path):
        cfg, state = TestEvaluate().fit_state(tmp_path)
        out_csv = tmp_path / "grid.csv"
        assert (
            main(
                [
                    "predict-grid",
                    "--state",
                    str(state),
                    "--range",
                    "-2.0",
                    "2.0",
                    "--resolution",
                    "7",
                    "--output",
                    str(out_csv),
                ]
            )
            == 0
        )
        lines = out_csv.read_text().strip().splitlines()
        assert lines[0] == "x,mean,std_function,std_y"
        assert len(lines) == 8
        first = [float(v) for v in lines[1].split(",")]
        last = [float(v) for v in lines[-1].split(",")]
        assert first[0] == -2.0 and last[0] == 2.0
        # std_y^2 = std_function^2 + noise, row by row
        state_obj, norm = load_state(state)
        noise = state_obj.likelihood.noise_variance * float(norm.target_std[0]) ** 2
        for line in lines[1:]:
            _, _, std_f, std_y = (float(v) for v in line.split(","))
            assert abs(std_y**2 - (std_f**2 + noise)) <= 1e-12 * max(1.0, std_y**2)

    def test_zero_resolution_exits_2(self, tmp_path):
        cfg, state = TestEvaluate().fit_state(tmp_path)
        assert main(["predict-grid", "--state", str(state), "--resolution", "0"]) == 2


class TestCompare:
    def test_five_method_suite(self, tmp_path):
        checkpoint = train_checkpoint(tmp_path)
        cfg = write_config(tmp_path, "cmp.cfg", f"output_dir = {tmp_path / 'cmp'}\n")
        assert main(["compare", str(cfg), "--checkpoint", str(checkpoint)]) == 0
        lines = (tmp_path / "cmp" / "compare.csv").read_text().strip().splitlines()
        assert len(lines) == 6  # header + 5 methods
        methods = [line.split(",")[0] for line in lines[1:]]
        assert methods == ["lla_exact", "valla", "ella", "lla_diag", "lla_last_layer"]

        # shared checkpoint pins every method's predictive mean bitwise
        from lagp.cli import predict_any

        probe = np.linspace(-1.5, 1.5, 5)[:, None]
        means = []
        for m in methods:
            state, _ = load_state(tmp_path / "cmp" / f"state_{m}.bin")
            means.append(np.stack([p.mean for p in predict_any(state, probe)]))
        for other in means[1:]:
            assert np.array_equal(means[0], other)

    def test_missing_checkpoint_fails_before_fit(self, tmp_path):
        cfg = write_config(tmp_path, "c2.cfg", f"output_dir = {tmp_path / 'c2'}\n")
        assert main(["compare", str(cfg), "--checkpoint", str(tmp_path / "none.bin")]) == 2
        assert not (tmp_path / "c2" / "compare.csv").exists()
