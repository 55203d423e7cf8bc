"""End-to-end command-line checks: exit codes, JSON payloads, report files.

Commands run in-process through ``main`` (fast, capturable); one subprocess
test proves the ``python -m`` entry point works outside this interpreter.
"""

import contextlib
import io
import json
import subprocess
import sys

import numpy as np

from tinyshot import embedstore as emb
from tinyshot import encoder as enc
from tinyshot.cli import main
from tinyshot.compress import load_clr

PNG_MAGIC = b"\x89PNG"


def run_cli(*argv):
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = main(list(argv))
    return code, out.getvalue(), err.getvalue()


def _payload(stdout):
    """Parse the leading JSON object (reports may append text after it)."""
    return json.loads(stdout.split("\n\n", 1)[0])


def _write_template_csv(path, n_classes=3, dim=6, templates=2, seed=130):
    rng = np.random.default_rng(seed)
    lines = ["class,template," + ",".join(f"e{i}" for i in range(dim))]
    for c in range(n_classes):
        for t in range(templates):
            vec = rng.standard_normal(dim)
            lines.append(f"class{c},prompt{t}," + ",".join(f"{v:.6f}" for v in vec))
    path.write_text("\n".join(lines) + "\n")


def _write_ppm(path, rng, size=8):
    pixels = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{size} {size}\n255\n".encode())
        fh.write(pixels.tobytes())
    return pixels


def _deploy_fixture(tmp_path, calibrated=True):
    """Save a small calibrated encoder, a matching table, and a PPM frame."""
    rng = np.random.default_rng(131)
    g = enc.LayerGraph(
        (enc.ConvLayer(rng.standard_normal((3, 3, 3, 4)) * 0.2, stride=2,
                       padding=1, relu6=True),
         enc.GlobalAvgPoolLayer(),
         enc.LinearLayer(rng.standard_normal((4, 6)) * 0.5)),
        (8, 8, 3), 6)
    image_path = tmp_path / "frame.ppm"
    pixels = _write_ppm(image_path, rng)
    samples = [enc.preprocess(pixels, g.input_shape),
               enc.preprocess(rng.integers(0, 256, (8, 8, 3), dtype=np.uint8),
                              g.input_shape)]
    if calibrated:
        g = enc.calibrate(g, samples)
    model_path = tmp_path / "tower.tvg"
    enc.save_graph(g, model_path)
    z = enc.forward_f32(g, samples[0])
    table = emb.build_table([emb.PromptedClass("self", [z]),
                             emb.PromptedClass("other", [-z])], precision="i8")
    table_path = tmp_path / "protos.tve"
    table_path.write_bytes(emb.pack_table(table))
    return model_path, table_path, image_path


# -- plumbing ----------------------------------------------------------------

def test_module_entry_point_subprocess():
    proc = subprocess.run(
        [sys.executable, "-m", "tinyshot.cli", "select-dim",
         "--classes", "80", "--budget", "10240"],
        capture_output=True, text=True)
    assert proc.returncode == 0
    payload = json.loads(proc.stdout)
    assert payload["selected_dim"] == 128
    assert payload["schema_version"] == 1


def test_every_help_screen_exits_zero():
    screens = (
        ["--help"], ["embed", "--help"], ["embed", "build", "--help"],
        ["select-dim", "--help"], ["infer", "--help"], ["train-toy", "--help"],
        ["gradcheck", "--help"], ["plan", "--help"], ["compress", "--help"],
        ["compress", "embed", "--help"], ["compress", "bench-attn", "--help"],
    )
    for argv in screens:
        code, out, _ = run_cli(*argv)
        assert code == 0, argv
        assert "usage" in out


def test_usage_errors_exit_one():
    for argv in ([], ["frobulate"], ["select-dim"],
                 ["select-dim", "--classes", "x", "--budget", "1"],
                 ["train-toy", "--dims", "a,b"]):
        code, _, err = run_cli(*argv)
        assert code == 1, argv
        assert "error" in err


# -- table commands ----------------------------------------------------------

def test_select_dim_reports_payload():
    code, out, _ = run_cli("select-dim", "--classes", "80", "--budget", "10240")
    assert code == 0
    payload = _payload(out)
    assert payload["selected_dim"] == 128
    assert payload["payload_bytes"] == 10240


def test_select_dim_infeasible_exits_two():
    code, _, err = run_cli("select-dim", "--classes", "1000", "--budget", "8000")
    assert code == 2
    assert "error" in err


def test_embed_build_writes_reloadable_table(tmp_path):
    csv_path, out_path = tmp_path / "t.csv", tmp_path / "t.tve"
    _write_template_csv(csv_path, n_classes=4, dim=6)
    code, out, _ = run_cli("embed", "build", "--csv", str(csv_path),
                           "--out", str(out_path))
    assert code == 0
    payload = _payload(out)
    assert payload["classes"] == 4 and payload["dim"] == 6
    assert payload["precision"] == "i8"
    assert payload["payload_bytes"] == 4 * 6
    table = emb.load_table(out_path)
    assert table.class_names == ("class0", "class1", "class2", "class3")
    first = out_path.read_bytes()
    run_cli("embed", "build", "--csv", str(csv_path), "--out", str(out_path))
    assert out_path.read_bytes() == first  # rebuilds are byte-identical


def test_embed_build_truncates_to_requested_dim(tmp_path):
    csv_path, out_path = tmp_path / "t.csv", tmp_path / "t4.tve"
    _write_template_csv(csv_path, n_classes=2, dim=8)
    code, out, _ = run_cli("embed", "build", "--csv", str(csv_path),
                           "--out", str(out_path), "--dim", "4",
                           "--precision", "f32")
    assert code == 0
    payload = _payload(out)
    assert payload["dim"] == 4
    assert payload["payload_bytes"] == 2 * 4 * 4


def test_embed_build_missing_csv_exits_two(tmp_path):
    code, _, err = run_cli("embed", "build", "--csv", str(tmp_path / "no.csv"),
                           "--out", str(tmp_path / "x.tve"))
    assert code == 2
    assert "error" in err


# -- inference ---------------------------------------------------------------

def test_infer_int8_and_float_paths(tmp_path):
    model, table, image = _deploy_fixture(tmp_path)
    code, out, _ = run_cli("infer", "--image", str(image), "--model", str(model),
                           "--table", str(table))
    assert code == 0
    payload = _payload(out)
    assert payload["class"] == "self"
    assert payload["int8"] is True
    assert payload["margin"] > 0
    assert len(payload["top"]) == 2
    code_f, out_f, _ = run_cli("infer", "--image", str(image), "--model",
                               str(model), "--table", str(table), "--float")
    assert code_f == 0
    assert _payload(out_f)["class"] == "self"
    # self-match against the i8-quantized prototype: near-unit cosine
    assert _payload(out_f)["score"] > 0.999


def test_infer_uncalibrated_model_needs_float_flag(tmp_path):
    model, table, image = _deploy_fixture(tmp_path, calibrated=False)
    code, _, err = run_cli("infer", "--image", str(image), "--model", str(model),
                           "--table", str(table))
    assert code == 2
    assert "calibration" in err
    assert run_cli("infer", "--image", str(image), "--model", str(model),
                   "--table", str(table), "--float")[0] == 0


# -- training ----------------------------------------------------------------

def test_train_toy_writes_curve_tower_and_figure(tmp_path):
    curve = tmp_path / "loss.csv"
    tower = tmp_path / "tower.tvg"
    fig = tmp_path / "loss.png"
    argv = ("train-toy", "--seed", "5", "--epochs", "3", "--batch", "8",
            "--fixture-size", "8", "--dims", "4,8", "--curve", str(curve),
            "--out", str(tower), "--fig", str(fig))
    code, out, _ = run_cli(*argv)
    assert code == 0
    payload = _payload(out)
    assert payload["steps"] == 3
    assert payload["epoch_loss_after"] < payload["epoch_loss_before"]
    assert set(payload["eval_retrieval_accuracy"]) == {"4", "8"}
    rows = curve.read_text().strip().splitlines()
    assert rows[0] == "step,lr,total,contrastive,embedding,matryoshka"
    assert len(rows) == 1 + 3
    assert enc.load_graph(tower).output_dim == 64
    assert fig.read_bytes()[:4] == PNG_MAGIC
    # same seed, same bytes
    first = curve.read_bytes()
    code2, out2, _ = run_cli(*argv)
    assert code2 == 0 and _payload(out2) == payload
    assert curve.read_bytes() == first


def test_gradcheck_passes_at_default_tolerance():
    code, out, _ = run_cli("gradcheck", "--seeds", "42")
    assert code == 0
    payload = _payload(out)
    assert payload["pass"] is True
    assert payload["max_relative_error"] < 1e-4
    assert set(payload["per_loss"]) == {"infonce", "embedding", "matryoshka",
                                        "enhanced", "total"}


# -- planning ----------------------------------------------------------------

def test_plan_sizes_emits_json_then_ascii_panels():
    code, out, _ = run_cli("plan", "--weights-bytes", "892KB",
                           "--table-bytes", "5KB", "--activation-bytes", "285KB")
    assert code == 0
    payload = _payload(out)
    assert payload["feasible"] is True
    assert payload["peak_activation_bytes"] == 285 * 1024
    assert payload["slack"]["flash"] == (2048 - 897) * 1024
    tail = out.split("\n\n", 1)[1]
    assert "flash (2048 KB)" in tail
    assert "sram (1024 KB)" in tail
    assert "892 KB" in tail


def test_plan_infeasible_exits_two_with_report():
    code, out, _ = run_cli("plan", "--weights-bytes", "3MB",
                           "--activation-bytes", "4KB")
    assert code == 2
    payload = _payload(out)
    assert payload["feasible"] is False
    assert payload["violations"] == ["weights"]
    assert "UNPLACED: weights" in out


def test_plan_list_platforms():
    code, out, _ = run_cli("plan", "--list-platforms")
    assert code == 0
    names = _payload(out)["platforms"]
    assert "stm32h7" in names and "max78000" in names


def test_plan_accepts_platform_file(tmp_path):
    spec = tmp_path / "board.platform"
    spec.write_text("flash = 64KB\nsram = 16KB\n")
    code, out, _ = run_cli("plan", "--platform-file", str(spec),
                           "--weights-bytes", "32KB", "--activation-bytes", "8KB")
    assert code == 0
    assert _payload(out)["platform"]["name"] == "board"


def test_plan_from_model_and_table_files(tmp_path):
    model, table, _ = _deploy_fixture(tmp_path)
    fig = tmp_path / "layout.png"
    code, out, _ = run_cli("plan", "--model", str(model), "--table", str(table),
                           "--platform", "esp32s3", "--fig", str(fig))
    assert code == 0
    payload = _payload(out)
    assert payload["feasible"] is True
    items = {p["item"]: p for p in payload["placements"]}
    assert items["embeddings"]["bytes"] == 2 * 6  # two i8 prototypes, d=6
    assert items["io"]["bytes"] == 8 * 8 * 3
    assert fig.read_bytes()[:4] == PNG_MAGIC


def test_plan_without_model_or_sizes_exits_two():
    code, _, err = run_cli("plan")
    assert code == 2
    assert "error" in err


# -- compression -------------------------------------------------------------

def test_compress_embed_reports_ratio_and_saves(tmp_path):
    rng = np.random.default_rng(132)
    classes = [emb.PromptedClass(f"c{i}", [rng.standard_normal(16)])
               for i in range(12)]
    table_path = tmp_path / "t.tve"
    table_path.write_bytes(emb.pack_table(emb.build_table(classes,
                                                          precision="f32")))
    out_path = tmp_path / "t.tvc"
    code, out, _ = run_cli("compress", "embed", "--table", str(table_path),
                           "--clusters", "3", "--rank", "2",
                           "--residual", "5", "--out", str(out_path))
    assert code == 0
    payload = _payload(out)
    assert (payload["rows"], payload["dim"]) == (12, 16)
    assert payload["ratio_values"] > 1.0
    assert payload["frobenius_error"] >= 0.0
    assert load_clr(out_path).shape == (12, 16)


def test_bench_attn_writes_delimited_table_and_figure(tmp_path):
    csv_path, fig_path = tmp_path / "attn.csv", tmp_path / "attn.png"
    code, out, _ = run_cli("compress", "bench-attn", "--n", "16,32", "--d", "8",
                           "--csv", str(csv_path), "--fig", str(fig_path))
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0] == "n,d,naive_multiplies,linear_multiplies,max_abs_diff"
    assert lines[1].startswith("16,8,4096,2176,")
    assert lines[2].startswith("32,8,16384,4352,")
    assert csv_path.read_text().strip().splitlines() == lines
    assert fig_path.read_bytes()[:4] == PNG_MAGIC
