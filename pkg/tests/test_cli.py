import json

import numpy as np
import pytest

from kylelab import cli, net
from kylelab.distributions import Family

FAST_TRAINING = """
[training]
n_samples = 500
epochs_per_loop = 2
n_loops = 3
"""


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def train_config(tmp_path, out="run", extra=""):
    return write(tmp_path, f"{out}.ini", f"""
[experiment]
kind = train
output_dir = {tmp_path / out}
[market]
mu_z = 0.0
{FAST_TRAINING}
{extra}
""")


@pytest.mark.parametrize("text,key", [
    ("[market]\nmu_zz = 1\n", "market.mu_zz"),
    ("[market]\nsigma_z = two\n", "market.sigma_z"),
    ("[training]\nn_loops = 0\n", "training"),
    ("[training]\ninsider_init = zeros\n", "training.insider_init"),
    ("[experiment]\nkind = plot\n", "experiment.kind"),
    ("[market.z_dist]\nfamily = cauchy\n", "market.z_dist.family"),
    ("[market.z_dist]\nfamily = normal\nlocation = 1\n", "market.z_dist.location"),
    ("[market.z_dist]\nfamily = normal\nloc = 3\nscale = 2\n", "market"),
    ("[experiment]\nkind = sweep\n[sweep]\nparameter = market.epsilon\n", "sweep.values"),
    ("[experiment]\nkind = sweep\n[sweep]\nparameter = market.epsilon\nvalues = nan\n",
     "sweep.values"),
    ("[experiment]\nkind = sweep\n[sweep]\nparameter = market.z_dist\nvalues = 1\n",
     "sweep.parameter"),
    ("[plotting]\ncolor = red\n", "plotting"),
    ("not an ini file", "<file>"),
])
def test_config_errors_name_the_key(tmp_path, monkeypatch, capsys, text, key):
    monkeypatch.chdir(tmp_path)
    path = write(tmp_path, "bad.ini", text)
    with pytest.raises(cli.ConfigError) as info:
        cli.load_config(path)
    assert info.value.key == key
    assert cli.main(["run", str(path)]) == cli.EXIT_CONFIG
    assert key in capsys.readouterr().err


def test_distribution_sections(tmp_path):
    cfg = cli.load_config(write(tmp_path, "d.ini", f"""
[experiment]
output_dir = {tmp_path}
[market]
mu_z = 0.5
[market.z_dist]
family = laplace
[market.y_dist]
family = gumbel
"""))
    assert cfg.market.z_dist.family is Family.LAPLACE
    assert (cfg.market.z_dist.mean, cfg.market.z_dist.variance) == pytest.approx((0.5, 4.0))
    assert cfg.market.y_dist.mean == pytest.approx(0.0, abs=1e-15)
    gam = cli.load_config(write(tmp_path, "g.ini", f"""
[experiment]
output_dir = {tmp_path}
[market]
mu_z = 0.0
sigma_z = 1.4142135623730951
[market.z_dist]
family = shifted_gamma
"""))
    assert gam.market.z_dist.params["shift"] == -1.0


def test_unwritable_output_dir(tmp_path):
    blocker = write(tmp_path, "file", "")
    path = write(tmp_path, "x.ini", f"[experiment]\noutput_dir = {blocker / 'sub'}\n")
    with pytest.raises(cli.ConfigError) as info:
        cli.load_config(path)
    assert info.value.key == "experiment.output_dir"


def test_run_writes_artifacts(tmp_path):
    assert cli.main(["run", str(train_config(tmp_path))]) == cli.EXIT_OK
    out = tmp_path / "run"
    names = {"meta.json", "trace.csv", "predictions.csv", "summary.json", "insider.json",
             "market_maker.json"}
    assert names <= {p.name for p in out.iterdir()}
    meta = json.loads((out / "meta.json").read_text())
    assert meta["training"]["learning_rate"] == 1e-4
    assert meta["defaults"]["fit_grid_points"] == 201
    table = cli.read_predictions(out / "predictions.csv")
    assert len(table["z"][0]) == len(table["v"][0]) == 201
    assert len(table["z_plateau"][0]) == 801
    trace = (out / "trace.csv").read_text().splitlines()
    assert trace[0].split(",")[0] == "loop" and len(trace) == 4
    ins, m = net.load(out / "insider.json")
    assert m["role"] == "insider" and m["seed"] == 0
    np.testing.assert_array_equal(ins(table["z"][0]), table["z"][1])


def test_run_is_bit_reproducible(tmp_path):
    a = train_config(tmp_path, "a")
    assert cli.main(["run", str(a)]) == cli.EXIT_OK
    first = {p.name: p.read_bytes() for p in (tmp_path / "a").iterdir()}
    assert cli.main(["run", str(a)]) == cli.EXIT_OK
    assert first == {p.name: p.read_bytes() for p in (tmp_path / "a").iterdir()}


def test_seed_override(tmp_path):
    a = train_config(tmp_path, "s")
    cli.main(["run", str(a), "--seed", "7"])
    assert json.loads((tmp_path / "s" / "meta.json").read_text())["seed"] == 7


def test_summary_is_recomputable_from_predictions(tmp_path):
    cli.main(["run", str(train_config(tmp_path))])
    out = tmp_path / "run"
    cfg = cli.load_config(train_config(tmp_path))
    summary = json.loads((out / "summary.json").read_text())
    again = cli.summary_from_predictions(cli.read_predictions(out / "predictions.csv"),
                                         cfg.market)
    again = json.loads(json.dumps(again))
    for key in ("equilibrium_estimate", "plateau_estimate"):
        assert summary[key] == again[key]
    last = (out / "trace.csv").read_text().splitlines()[-1].split(",")
    assert float(last[0]) == 3


def test_single_value_sweep_equals_run(tmp_path):
    cli.main(["run", str(train_config(tmp_path))])
    sweep = write(tmp_path, "sw.ini", f"""
[experiment]
kind = sweep
output_dir = {tmp_path / 'sw'}
[market]
mu_z = 0.0
{FAST_TRAINING}
[sweep]
parameter = market.epsilon
values = 0.0
""")
    assert cli.main(["sweep", str(sweep)]) == cli.EXIT_OK
    sub = tmp_path / "sw" / "epsilon=0.0"
    for name in ("meta.json", "trace.csv", "predictions.csv", "summary.json",
                 "insider.json", "market_maker.json"):
        assert (sub / name).read_bytes() == (tmp_path / "run" / name).read_bytes(), name
    rows = (tmp_path / "sw" / "sweep.csv").read_text().splitlines()
    assert rows[0].startswith("value,seed,status") and len(rows) == 2


def test_sweep_records_failures_and_continues(tmp_path):
    sweep = write(tmp_path, "sw.ini", f"""
[experiment]
kind = sweep
output_dir = {tmp_path / 'sw'}
{FAST_TRAINING}
[sweep]
parameter = training.learning_rate
values = 1e300, 1e-4
""")
    assert cli.main(["sweep", str(sweep), "--jobs", "2"]) == cli.EXIT_DIVERGED
    rows = [r.split(",") for r in (tmp_path / "sw" / "sweep.csv").read_text().splitlines()]
    assert [r[2] for r in rows[1:]] == ["diverged", "ok"]
    assert [r[1] for r in rows[1:]] == ["0", "1"]


def test_divergence_exit_code(tmp_path):
    path = train_config(tmp_path, extra="")
    text = path.read_text().replace("n_loops = 3", "n_loops = 3\nlearning_rate = 1e300")
    path.write_text(text)
    assert cli.main(["run", str(path)]) == cli.EXIT_DIVERGED


def test_oracle_plateau(tmp_path):
    path = write(tmp_path, "o.ini", f"""
[experiment]
kind = oracle
output_dir = {tmp_path / 'o'}
[market]
mu_z = 0.5
epsilon = 1.0
""")
    assert cli.main(["oracle", str(path)]) == cli.EXIT_OK
    s = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert s["plateau_estimate"]["lower"] == pytest.approx(-0.5, abs=0.01)
    assert s["plateau_estimate"]["upper"] == pytest.approx(1.5, abs=0.01)
    assert s["plateau_prediction"]["lower"] == -0.5
    assert s["max_abs_quadrature_vs_linear_price"] < 1e-6
    kinds = {line.split(",")[0] for line in
             (tmp_path / "o" / "oracle.csv").read_text().splitlines()[1:]}
    assert kinds == {"order_theory", "price_theory", "price_quadrature", "best_response"}


def test_gradcheck_command(tmp_path, capsys):
    assert cli.main(["gradcheck", "--seed", "3", "--out", str(tmp_path)]) == cli.EXIT_OK
    res = json.loads((tmp_path / "gradcheck.json").read_text())
    assert res["max_rel_error"] < 1e-4
    assert "max relative gradient error" in capsys.readouterr().out


def test_run_experiment_dispatches_on_kind(tmp_path):
    path = write(tmp_path, "g.ini", f"""
[experiment]
kind = gradcheck
output_dir = {tmp_path / 'g'}
""")
    assert cli.run_experiment(path) == cli.EXIT_OK
    assert (tmp_path / "g" / "gradcheck.json").exists()
    assert cli.run_experiment(write(tmp_path, "b.ini", "[market]\nx = 1\n")) == cli.EXIT_CONFIG


def test_oracle_iterated_equilibrium(tmp_path):
    path = write(tmp_path, "o.ini", f"""
[experiment]
kind = oracle
output_dir = {tmp_path / 'o'}
[market]
mu_z = 0.0
[oracle]
best_response_iterations = 1
""")
    assert cli.main(["oracle", str(path)]) == cli.EXIT_OK
    it = json.loads((tmp_path / "o" / "summary.json").read_text())["iterated_equilibrium"]
    assert it["estimate"]["mm_slope"] == pytest.approx(1.0, abs=1e-3)
    assert it["estimate"]["insider_slope"] == pytest.approx(0.5, abs=1e-3)
    assert set(it["bend"]) == {"bend", "left", "right"}
