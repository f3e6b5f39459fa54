import csv
import math

import pytest

from proxyreplay import cli
from proxyreplay import gradients as G
from proxyreplay.config import dump_config, load_config, parse_config
from proxyreplay.errors import ConfigError

BASE = """
[stream]
num_tasks = 2
classes_per_task = 2
samples_per_class = 30
dim = 6
mean_scale = 1.0

[model]
hidden = 8, 8
embed_dim = 4

[hyper]
alpha = 0.01
beta = 0.1

[experiment]
methods = er, pcr
seeds = 0, 1, 2
buffer_sizes = 40
"""


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "exp.ini"
    p.write_text(BASE)
    return p


def read(path):
    return list(csv.DictReader(open(path)))


def test_run_writes_six_cells_and_aggregate(config, tmp_path, capsys):
    out = tmp_path / "out"
    assert cli.main(["run", "--config", str(config), "--out", str(out)]) == 0
    runs = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert runs == [f"{m}-M40-s{s}" for m in ("er", "pcr") for s in range(3)]
    agg = read(out / "aggregate.csv")
    assert len(agg) == 2 * 3
    # aggregate means equal the per-run values read back from disk
    for row in agg:
        vals = [float(read(out / f"{row['method']}-M40-s{s}" / "metrics.csv")[0][row["metric"]]) for s in range(3)]
        assert float(row["mean"]) == math.fsum(vals) / 3
        assert float(row["ci95"]) == cli.ci_halfwidth(vals)
    assert "A_T=" in capsys.readouterr().out


def test_rerun_is_byte_identical(config, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    cli.main(["run", "--config", str(config), "--out", str(a), "--seeds", "3"])
    cli.main(["run", "--config", str(config), "--out", str(b), "--seeds", "3"])
    for name in ("er-M40-s3/metrics.csv", "er-M40-s3/accuracy_matrix.csv", "pcr-M40-s3/loss_log.csv", "aggregate.csv"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_effective_config_round_trips(config, tmp_path):
    out = tmp_path / "o"
    cli.main(["run", "--config", str(config), "--out", str(out), "--seeds", "5"])
    again = load_config(out / "config.ini")
    assert again == load_config(out / "config.ini")
    assert again.seeds == [5] and again.out == str(out)
    assert dump_config(parse_config(dump_config(again))) == dump_config(again)
    re_out = tmp_path / "o2"
    cli.main(["run", "--config", str(out / "config.ini"), "--out", str(re_out)])
    assert (re_out / "pcr-M40-s5" / "metrics.csv").read_bytes() == (out / "pcr-M40-s5" / "metrics.csv").read_bytes()


def test_missing_required_field_exits_2(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text(BASE.replace("methods = er, pcr\n", ""))
    assert cli.main(["run", "--config", str(p)]) == 2
    assert "experiment.methods" in capsys.readouterr().err


@pytest.mark.parametrize(
    "old,new,field",
    [
        ("dim = 6", "dim = many", "stream.dim"),
        ("dim = 6", "dim = 0", "stream.dim"),
        ("alpha = 0.01", "alpha = -1", "hyper.alpha"),
        ("methods = er, pcr", "methods = er, gss", "experiment.methods"),
        ("seeds = 0, 1, 2", "seeds = 1, 1", "experiment.seeds"),
        ("embed_dim = 4", "embed_dim = 4\nwidth = 3", "model.width"),
    ],
)
def test_field_level_diagnostics(old, new, field):
    with pytest.raises(ConfigError) as e:
        parse_config(BASE.replace(old, new))
    assert e.value.field == field


def test_env_var_sets_output_dir(config, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "env"))
    assert cli.main(["run", "--config", str(config), "--seeds", "0"]) == 0
    assert (tmp_path / "env" / "er-M40-s0" / "metrics.csv").exists()


def test_failed_cell_keeps_other_results(config, tmp_path, monkeypatch):
    real = cli.run

    def flaky(stream, spec, seed, **kw):
        if spec.method == "pcr":
            raise RuntimeError("boom")
        return real(stream, spec, seed, **kw)

    monkeypatch.setattr(cli, "run", flaky)
    out = tmp_path / "f"
    assert cli.main(["run", "--config", str(config), "--out", str(out), "--seeds", "0"]) == 1
    status = {r["run_id"]: r["status"] for r in read(out / "status.csv")}
    assert status["er-M40-s0"] == "ok" and status["pcr-M40-s0"].startswith("failed")
    assert (out / "er-M40-s0" / "metrics.csv").exists()


def test_workers_match_sequential(config, tmp_path):
    cli.main(["run", "--config", str(config), "--out", str(tmp_path / "s"), "--seeds", "0,1"])
    cli.main(["run", "--config", str(config), "--out", str(tmp_path / "p"), "--seeds", "0,1", "--workers", "2"])
    assert (tmp_path / "s" / "aggregate.csv").read_bytes() == (tmp_path / "p" / "aggregate.csv").read_bytes()


def test_gradcheck_passes_and_accepts_instances(capsys):
    assert cli.main(["gradcheck", "--instances", "3"]) == 0
    out = capsys.readouterr().out
    assert "hpcr" in out and "3 instances" in out


def test_gradcheck_negative_control(monkeypatch, capsys):
    real = G.grad_pcr_closed_form
    monkeypatch.setattr(G, "grad_pcr_closed_form", lambda *a, **k: 1.01 * real(*a, **k))
    assert cli.main(["gradcheck", "--instances", "2"]) == 1
    assert "pcr_closed_form" in capsys.readouterr().err


def test_tau_sweep_shapes(config, tmp_path):
    one = tmp_path / "one"
    assert cli.main(["tau-sweep", "--config", str(config), "--out", str(one), "--seeds", "0"]) == 0
    assert len(read(one / "tau_sweep.csv")) == 1
    grid = BASE + "\n[tau_sweep]\ntau_max = 0.12, 0.14, 0.16, 0.18\ntau_min = 0.01, 0.03, 0.05, 0.07, 0.09\n"
    config.write_text(grid.replace("samples_per_class = 30", "samples_per_class = 5"))
    four = tmp_path / "four"
    assert cli.main(["tau-sweep", "--config", str(config), "--out", str(four), "--seeds", "0"]) == 0
    rows = read(four / "tau_sweep.csv")
    assert len(rows) == 20
    assert {(float(r["tau_max"]), float(r["tau_min"])) for r in rows} == {
        (hi, lo) for hi in (0.12, 0.14, 0.16, 0.18) for lo in (0.01, 0.03, 0.05, 0.07, 0.09)
    }


def test_export_data(config, tmp_path):
    assert cli.main(["export-data", "--config", str(config), "--out", str(tmp_path), "--seeds", "4"]) == 0
    rows = read(tmp_path / "stream_s4.csv")
    assert len(rows) == 4 * 30 + 4 * 8


def test_plot_writes_png_next_to_csv(config, tmp_path):
    out = tmp_path / "p"
    cli.main(["run", "--config", str(config), "--out", str(out), "--seeds", "0", "--grad-audit"])
    assert cli.main(["plot", "--out", str(out)]) == 0
    for name in ("aggregate.png", "er-M40-s0/accuracy_matrix.png", "er-M40-s0/loss_log.png",
                 "pcr-M40-s0/grad_audit.png"):
        assert (out / name).read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"


def test_ci_halfwidth():
    assert math.isnan(cli.ci_halfwidth([0.5]))
    # one degree of freedom: t_{0.975} = tan(0.475 pi); sd of (0, 1) is 1/sqrt(2)
    assert cli.ci_halfwidth([0.0, 1.0]) == pytest.approx(math.tan(0.475 * math.pi) / 2, rel=1e-9)
