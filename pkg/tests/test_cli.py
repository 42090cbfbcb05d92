from dataclasses import fields, replace
from pathlib import Path

import pytest

from gluattn import tensor
from gluattn.cli import main, params_report
from gluattn.errors import ConfigError
from gluattn.experiment import ExperimentSpec, format_spec, parse_spec

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

TINY = """
task = classify
variant = {variant}
n_layers = 1
d_model = 12
n_heads = 2
ffn_hidden = 8
n_classes = 4
n_samples = 8
n_val = 4
batch_size = 4
epochs = {epochs}
output_dir = {out}
"""


def write_spec(tmp_path, variant="glu", epochs=1, name="spec.txt", out=None):
    path = tmp_path / name
    path.write_text(TINY.format(variant=variant, epochs=epochs, out=out or tmp_path / "out"))
    return path


class TestSpec:
    def test_round_trip_defaults(self):
        spec = ExperimentSpec()
        assert parse_spec(format_spec(spec)) == spec

    def test_round_trip_every_field_changed(self):
        spec = replace(ExperimentSpec(), task="lm", variant="glu", n_layers=3, d_model=12, n_heads=2,
                       final_norm=True, dtype="f64", data_path="some/file.txt", lr_max=0.1 + 0.2,
                       grad_clip=1.5, output_dir="elsewhere")
        back = parse_spec(format_spec(spec))
        assert back == spec
        assert all(getattr(back, f.name) == getattr(spec, f.name) for f in fields(spec))

    @pytest.mark.parametrize("name", ["classify_memorize.txt", "lm_desk.txt", "cifar10_reference.txt"])
    def test_shipped_configs_parse(self, name):
        spec = parse_spec((CONFIGS / name).read_text())
        assert parse_spec(format_spec(spec)) == spec

    def test_comments_and_blanks(self):
        spec = parse_spec("# header\n\n  d_model = 12   # inline\nn_heads=2\n")
        assert (spec.d_model, spec.n_heads) == (12, 2)

    @pytest.mark.parametrize("text,match", [
        ("colour = red", "unknown key"),
        ("epochs = 1\nepochs = 2", "duplicate"),
        ("epochs = many", "epochs"),
        ("final_norm = yes", "final_norm"),
        ("just words", "key = value"),
        ("variant = mixed", "variant"),
        ("d_model = 10\nn_heads = 2\nvariant = glu", "divisible by 3"),
    ])
    def test_rejects(self, text, match):
        with pytest.raises(ConfigError, match=match):
            parse_spec(text)


class TestParams:
    def test_reference(self, capsys):
        assert main(["params", "384", "8"]) == 0
        out = capsys.readouterr().out
        assert out.count("589,824") == 2
        assert "384->512" in out and "256->384" in out
        assert "parity: equal" in out

    def test_small(self):
        text, ok = params_report(6, 1)
        assert ok
        assert text.count(" 144") == 2

    def test_flops_listed(self):
        text, _ = params_report(48, 4, seq_len=16)
        # GLU keeps projection FLOPs and shrinks the value mixing to 2d/3 wide
        assert f"{2 * 16 * 16 * 48:,d}" in text and f"{2 * 16 * 16 * 32:,d}" in text

    @pytest.mark.parametrize("argv", [["params", "10", "2"], ["params", "384", "7"]])
    def test_indivisible(self, argv, capsys):
        assert main(argv) == 1
        assert "divisible" in capsys.readouterr().err

    def test_usage_errors(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["params", "ten", "2"])
        assert info.value.code == 1
        with pytest.raises(SystemExit) as info:
            main([])
        assert info.value.code == 1


class TestGradcheck:
    def test_ops_pass(self, capsys):
        assert main(["gradcheck", "ops"]) == 0
        assert "worst relative error" in capsys.readouterr().out

    def test_corrupted_silu_derivative_fails(self, monkeypatch, capsys):
        monkeypatch.setattr(tensor, "_silu_grad", lambda x: 1.1 * (x * 0 + 1))
        assert main(["gradcheck", "ops"]) == 2
        captured = capsys.readouterr()
        assert "silu" in captured.err and "FAIL" in captured.out

    def test_model_scope_covers_every_layer_type(self, capsys):
        assert main(["gradcheck", "model"]) == 0
        out = capsys.readouterr().out
        names = {line.split()[0] for line in out.splitlines() if line.endswith("ok")}
        for layer in ("matmul", "softmax_last", "linear", "embedding", "layer_norm", "glu_packed", "glu_ffn",
                      "mha", "glu_mha", "block", "block_glu", "classifier", "classifier_glu", "lm", "lm_glu"):
            assert layer in names


class TestTrain:
    def test_zero_epochs_header_only(self, tmp_path):
        assert main(["train", str(write_spec(tmp_path, epochs=0))]) == 0
        assert (tmp_path / "out" / "metrics.csv").read_text() == "epoch,step,phase,loss,accuracy,lr\n"

    def test_identical_specs_identical_bytes(self, tmp_path):
        a = write_spec(tmp_path, variant="both", epochs=2, name="a.txt", out=tmp_path / "a")
        b = write_spec(tmp_path, variant="both", epochs=2, name="b.txt", out=tmp_path / "b")
        assert main(["train", str(a)]) == 0
        assert main(["train", str(b)]) == 0
        for rel in ("baseline/metrics.csv", "glu/metrics.csv", "comparison.csv",
                    "baseline/checkpoint.glua", "glu/checkpoint.glua"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel

    def test_csv_schema(self, tmp_path):
        assert main(["train", str(write_spec(tmp_path, epochs=2))]) == 0
        lines = (tmp_path / "out" / "metrics.csv").read_text().splitlines()
        assert lines[0] == "epoch,step,phase,loss,accuracy,lr"
        phases = [line.split(",")[2] for line in lines[1:]]
        assert phases == ["train", "train", "val"] * 2 + ["summary"]
        for line in lines[1:]:
            for field in line.split(",")[3:]:
                assert repr(float(field)) == field

    def test_env_override(self, tmp_path, monkeypatch):
        monkeypatch.setenv("GLUATTN_OUTPUT_DIR", str(tmp_path / "override"))
        assert main(["train", str(write_spec(tmp_path, epochs=0))]) == 0
        assert (tmp_path / "override" / "metrics.csv").exists()
        assert not (tmp_path / "out").exists()

    def test_missing_spec_is_io_error(self, tmp_path):
        assert main(["train", str(tmp_path / "nope.txt")]) == 3

    def test_invalid_spec_is_usage_error(self, tmp_path, capsys):
        path = tmp_path / "bad.txt"
        path.write_text("epochs = -1\n")
        assert main(["train", str(path)]) == 1
        assert "epochs" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_names_step(self, tmp_path, capsys):
        path = tmp_path / "hot.txt"
        path.write_text(TINY.format(variant="baseline", epochs=2, out=tmp_path / "out") + "lr_max = 1e300\n")
        assert main(["train", str(path)]) == 2
        assert "step" in capsys.readouterr().err

    def test_unwritable_output_is_io_error(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("")
        assert main(["train", str(write_spec(tmp_path, epochs=0, out=blocker / "sub"))]) == 3
