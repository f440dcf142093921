import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ranmtl import harness
from ranmtl.cli import main
from ranmtl.models import count_params
from ranmtl.metrics import compute_metrics, improvement_pct, omega, task_metric
from ranmtl.scenario import save_datasets
from ranmtl.tasks import to_training_units
from conftest import ALL_TASKS

FAST = dict(epochs=2, repeats=1, batch_size=16, lr=1e-3, arch_options={"shared_width": 8})


# -- metrics -------------------------------------------------------------------------------


class Perfect:
    tasks = ALL_TASKS

    def __init__(self, node):
        self.node = node

    def predict(self, x):
        block = self.node.splits["val"]
        return {t: to_training_units(t, block.labels(t)) for t in self.tasks}


class Half(Perfect):
    def predict(self, x):
        out = super().predict(x)
        out["IN"] = np.full_like(out["IN"], 0.5)
        out["LOS"] = np.full_like(out["LOS"], 0.5)
        return out


def test_perfect_predictor(tiny_nodes):
    m = compute_metrics(Perfect(tiny_nodes[0]), tiny_nodes[0], "val")
    assert m == {"SC": 0.0, "PS": 0.0, "IN": 1.0, "LOS": 1.0}
    assert omega(m) == 2.0


def test_constant_half_classifier(tiny_nodes):
    node = tiny_nodes[0]
    m = compute_metrics(Half(node), node, "val")
    block = node.splits["val"]
    # 0.5 thresholds to the positive class
    assert m["IN"] == pytest.approx(np.mean(block.indoor == 1))
    assert m["LOS"] == pytest.approx(np.mean(block.los == 1))


def test_ps_mae_in_meters():
    pred = np.array([[0.001, 0.0, 0.0]])
    target = np.zeros((1, 3))
    assert task_metric("PS", pred, target) == pytest.approx(1000 * 0.001 / 3)
    assert task_metric("PS", pred, target, normalized=True) == pytest.approx(0.001 / 3)
    assert task_metric("SC", np.array([[0.1]]), np.array([[0.0]])) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        task_metric("SC", np.zeros((0, 1)), np.zeros((0, 1)))


def test_omega_worked_example():
    assert omega({"IN": 0.9, "LOS": 0.8, "SC": 3.0, "PS": 2.0}) == pytest.approx(-3.3)
    with pytest.raises(KeyError):
        omega({"IN": 0.9, "LOS": 0.8, "SC": 3.0})


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=2, max_size=2), st.lists(st.floats(0, 10), min_size=2, max_size=2),
       st.sampled_from(["IN", "LOS", "SC", "PS"]), st.floats(1e-3, 1))
def test_omega_monotone(acc, mae, task, delta):
    m = {"IN": acc[0], "LOS": acc[1], "SC": mae[0], "PS": mae[1]}
    better = dict(m)
    better[task] += delta if task in ("IN", "LOS") else -delta
    assert omega(better) > omega(m)


def test_improvement_sign():
    assert improvement_pct("SC", 1.0, 2.0) == pytest.approx(50.0)
    assert improvement_pct("IN", 0.9, 0.8) == pytest.approx(12.5)
    assert improvement_pct("PS", 3.0, 2.0) < 0


# -- sparsification ----------------------------------------------------------------------------


def test_sparsify_counts(tiny_nodes):
    node = tiny_nodes[0]
    n = len(node.splits["train"])
    big = replace(node, splits={**node.splits, "train": node.splits["train"].take(np.arange(600) % n)})
    (sub,) = harness.sparsify([big], 0.01, seed=0)
    assert len(sub.splits["train"]) == 6
    assert sub.splits["val"] is big.splits["val"]
    assert not np.array_equal(sub.mean, big.mean)
    assert harness.sparsify(tiny_nodes, 1.0) == list(tiny_nodes)
    with pytest.raises(ValueError):
        harness.sparsify(tiny_nodes, 0.001)
    with pytest.raises(ValueError):
        harness.sparsify(tiny_nodes, 0.0)


def test_sparsify_seeded(tiny_nodes):
    a = harness.sparsify(tiny_nodes, 0.5, seed=1)
    b = harness.sparsify(tiny_nodes, 0.5, seed=1)
    c = harness.sparsify(tiny_nodes, 0.5, seed=2)
    assert all(np.array_equal(x.splits["train"].x, y.splits["train"].x) for x, y in zip(a, b))
    assert any(not np.array_equal(x.splits["train"].x, y.splits["train"].x) for x, y in zip(a, c))
    for full, sub in zip(tiny_nodes, a):
        assert len(sub.splits["train"]) == int(np.floor(len(full.splits["train"]) * 0.5))


# -- configuration -----------------------------------------------------------------------------


def test_load_yaml_and_json(tmp_path):
    y = tmp_path / "exp.yaml"
    y.write_text("name: a\narchitecture: MMoE\nweighting: PCGrad\ntopology: {mode: fed_sim, K: 3}\ntasks: [SC, IN]\n")
    cfg = harness.load_config(y)
    assert cfg.architecture == "MMoE" and cfg.tasks == ("SC", "IN")
    assert cfg.topology_config().K == 3 and cfg.topology_config().tau_initial == 10
    j = tmp_path / "exp.json"
    j.write_text(json.dumps(cfg.to_dict()))
    assert harness.load_config(j) == cfg


@pytest.mark.parametrize("bad", [{"tasks": []}, {"tasks": ["XX"]}, {"architecture": "Nope"},
                                 {"weighting": "Nope"}, {"train_fraction": 0}, {"repeats": 0}, {"bogus": 1}])
def test_config_validation(bad):
    with pytest.raises(ValueError):
        harness.ExperimentConfig.from_dict(bad)


def test_resolve_dataset(tmp_path, tiny_nodes):
    save_datasets(tiny_nodes, tmp_path)
    loaded = harness.resolve_dataset(str(tmp_path))
    assert [n.node_id for n in loaded] == [n.node_id for n in tiny_nodes]
    with pytest.raises(FileNotFoundError):
        harness.resolve_dataset(str(tmp_path / "missing"))


# -- reports -----------------------------------------------------------------------------------


def test_experiment_report_round_trip(tiny_nodes, tmp_path):
    cfg = harness.ExperimentConfig(name="STL_local", architecture="STL", weighting="EW", tasks=("SC",), **FAST)
    report = harness.run_experiment(cfg, tiny_nodes[:2])
    report.extend(harness.run_experiment(replace(cfg, name="other", seed=5), tiny_nodes[:2]))
    paths = harness.emit_report(report, tmp_path)
    assert [p.name for p in paths] == ["series.csv", "finals.csv", "summary.json"]
    assert paths[0].read_text().startswith("# omega:")
    back = harness.read_report(tmp_path)
    assert back.series == report.series and back.finals == report.finals
    assert json.loads(back.to_json()) == json.loads(report.to_json())
    table = harness.improvement_table(report)
    assert table["STL_local"]["SC"] == 0.0
    summary = report.summary["STL_local"]
    assert summary["params"] == count_params(cfg.arch())["total"]
    assert len(summary["wall_clock_s"]) == 1 and summary["comm_bytes"] == [0]


def test_empty_report_writes_headers(tmp_path):
    harness.emit_report(harness.MetricsReport(), tmp_path)
    lines = (tmp_path / "series.csv").read_text().splitlines()
    assert lines[0].startswith("#") and lines[1].split(",") == list(harness.SERIES_FIELDS)
    assert len(lines) == 2
    assert harness.read_report(tmp_path).finals == []


def test_report_rejects_bad_metrics():
    r = harness.MetricsReport()
    with pytest.raises(ValueError):
        r.add_final({"experiment": "e", "repeat": 0, "node": "n", "task": "IN", "split": "test",
                     "value": 1.5, "normalized": 1.5})
    with pytest.raises(ValueError):
        r.add_final({"experiment": "e", "repeat": 0, "node": "n", "task": "SC", "split": "test",
                     "value": -1.0, "normalized": -1.0})


def test_report_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        harness.emit_report(harness.MetricsReport(), blocker / "sub")


# -- sweeps ------------------------------------------------------------------------------------


def test_small_sweep(tiny_nodes):
    kw = dict(repeats=2, epochs=2, batch_size=32, lr=1e-3)
    table = harness.sweep_design_space(tiny_nodes[:2], ("HPS", "CGC"), ("EW", "MGDA"), **kw)
    assert len(table.rows) == 4 and len(table.runs) == 4 * 2 * 2
    for r in table.rows:
        assert set(harness.SWEEP_FIELDS) == set(r)
        assert r["omega_min"] <= r["omega_q25"] <= r["omega_median"] <= r["omega_q75"] <= r["omega_max"]
        assert r["runs"] == 4
    ranked = table.ranked()
    assert [r["omega_q25"] for r in ranked] == sorted((r["omega_q25"] for r in ranked), reverse=True)
    again = harness.sweep_design_space(tiny_nodes[:2], ("HPS", "CGC"), ("EW", "MGDA"), **kw)
    assert [r["omega_mean"] for r in again.rows] == [r["omega_mean"] for r in table.rows]
    with pytest.raises(KeyError):
        table.cell("MMoE", "EW")


def test_sweep_needs_all_tasks(tiny_nodes):
    with pytest.raises(ValueError):
        harness.sweep_design_space(tiny_nodes[:1], ("HPS",), ("EW",), tasks=("SC", "PS"))


def test_sweep_parallel_matches_serial(tiny_nodes):
    kw = dict(repeats=1, epochs=1, batch_size=32)
    a = harness.sweep_design_space(tiny_nodes[:2], ("HPS",), ("EW", "UW"), **kw)
    b = harness.sweep_design_space(tiny_nodes[:2], ("HPS",), ("EW", "UW"), workers=2, **kw)
    assert [r["omega_mean"] for r in a.rows] == [r["omega_mean"] for r in b.rows]


def test_grouping_sweep(tiny_nodes):
    base = harness.ExperimentConfig(architecture="CGC", weighting="UW", **FAST)
    rows, report = harness.grouping_sweep(tiny_nodes[:2], base=base)
    assert len(harness.all_subsets()) == 15
    for t in ALL_TASKS:
        mine = [r for r in rows if r["task"] == t]
        assert len(mine) == 8 and sum(r["best"] for r in mine) == 1
    single = harness.run_experiment(replace(base, architecture="STL", weighting="EW", tasks=("PS",)),
                                    tiny_nodes[:2], name="PS")
    assert single.finals == [r for r in report.finals if r["experiment"] == "PS"]
    full = harness.run_experiment(base, tiny_nodes[:2], name="SC+PS+IN+LOS")
    assert full.finals == [r for r in report.finals if r["experiment"] == "SC+PS+IN+LOS"]


def test_topology_comparison(tiny_nodes):
    base = harness.ExperimentConfig(architecture="HPS", weighting="EW", **FAST,
                                    topology={"mode": "local"})
    base = replace(base, epochs=1)
    report = harness.topology_comparison(tiny_nodes[:2], base, ("STL_local", "MTL_local", "FedSim"))
    assert report.experiments() == ["STL_local", "MTL_local", "FedSim"]
    imp = report.summary["improvement_pct"]
    assert all(v == 0.0 for v in imp["STL_local"].values())
    assert set(imp["FedSim"]) == set(ALL_TASKS)
    assert set(report.summary["STL_local"]["tasks"]) == set(ALL_TASKS)
    with pytest.raises(ValueError):
        harness.topology_comparison(tiny_nodes[:1], base, ("Bogus",))


def test_param_report():
    rows = {r["model"]: r for r in harness.param_report()}
    assert rows["HPS"]["total"] == 16406 and rows["HPS"]["note"] == ""
    assert rows["CGC"]["total"] == 62646 and "-4" in rows["CGC"]["note"]
    assert rows["STL:PS"]["total"] == 6659 and "+2" in rows["STL:PS"]["note"]


# -- command line ------------------------------------------------------------------------------


def test_cli_end_to_end(tmp_path, capsys):
    scen = tmp_path / "scen.yaml"
    scen.write_text("preset: desk\nues_per_snapshot: 4\n")
    data = tmp_path / "data"
    assert main(["generate", "--config", str(scen), "--seed", "3", "--out", str(data)]) == 0
    assert len(list(data.glob("*.npz"))) == 12
    exp = tmp_path / "exp.yaml"
    exp.write_text("architecture: HPS\nweighting: EW\nepochs: 1\nrepeats: 1\nbatch_size: 32\n"
                   "arch_options: {shared_width: 8}\n")
    out = tmp_path / "train"
    assert main(["train", "--config", str(exp), "--data", str(data), "--out", str(out)]) == 0
    assert (out / "finals.csv").exists() and list(out.glob("*.jsonl"))
    assert main(["report", str(out)]) == 0
    assert main(["sweep", "--config", str(exp), "--data", str(data), "--architectures", "HPS",
                 "--weightings", "EW", "--out", str(tmp_path / "sweep")]) == 0
    assert (tmp_path / "sweep" / "sweep.csv").exists()
    sparse = tmp_path / "sparse"
    assert main(["sparse", "--data", str(data), "--fraction", "0.5", "--out", str(sparse)]) == 0
    assert main(["report", "--params"]) == 0
    assert "62646" in capsys.readouterr().out
    assert main(["report"]) == 2
