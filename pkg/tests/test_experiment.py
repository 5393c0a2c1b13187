import pytest

from michscan.experiment import (
    ConfigError,
    SimulationConfig,
    SweepConfig,
    SweepReport,
    config_digest,
    default_simulation_config,
    default_sweep_config,
    run_sweep,
)


class TestConfigs:
    def test_defaults_are_fixed_points(self):
        sim = default_simulation_config()
        assert SimulationConfig.from_json(sim).effective == sim
        sweep = default_sweep_config()
        assert SweepConfig.from_json(sweep).effective == sweep

    def test_seed_override_changes_digest(self):
        a = SweepConfig.from_json({}, master_seed=1)
        b = SweepConfig.from_json({}, master_seed=2)
        assert config_digest(a.effective) != config_digest(b.effective)
        assert config_digest(a.effective) == config_digest(SweepConfig.from_json({"master_seed": 1}).effective)

    def test_explicit_network_and_input(self):
        base = SimulationConfig.from_json({})
        obj = {"network": base.network.to_json(), "test_input": base.test_input.tolist()}
        cfg = SimulationConfig.from_json(obj)
        assert cfg.network.to_json() == base.network.to_json()
        assert (cfg.test_input == base.test_input).all()

    @pytest.mark.parametrize(
        "obj, msg",
        [
            ({"trials": 0}, "trials"),
            ({"trials": 2.5}, "trials"),
            ({"n_ra": []}, "n_ra"),
            ({"n_ra": [5, 5]}, "n_ra"),
            ({"p_threshold": 0}, "p_threshold"),
            ({"detect_layer": "conv9"}, "detect_layer"),
            ({"attacks": [{"kind": "bit_flip"}, {"kind": "bit_flip"}]}, "unique"),
            ({"attacks": [{"kind": "bit_flip", "target_layer": "x"}]}, "unknown layer"),
            ({"attacks": [{"kind": "nope"}]}, "unknown attack kind"),
            ({"predeploy": {"n_traces": 3}}, ">= 6"),
            ({"predeploy": {"layer_label": "fc"}}, "detect_layer"),
            ({"test_input": [1, 2]}, "test_input"),
            ({"network": {"layers": [], "seed": 1}}, "cannot be combined"),
        ],
    )
    def test_validation(self, obj, msg):
        with pytest.raises(ConfigError, match=msg):
            SweepConfig.from_json(obj)

    def test_report_invariant(self):
        with pytest.raises(ValueError):
            SweepReport(({"condition": "x", "n_ra": 5, "trials": 1, "detections": 2, "mean_log10_p": 0},), "d")


def test_sweep_is_deterministic_and_ordered():
    obj = {
        "n_ra": [5],
        "trials": 2,
        "predeploy": {"n_traces": 30},
        "attacks": [{"kind": "bit_flip", "target_layer": "conv2", "magnitude": 1, "name": "bit"}],
    }
    a = run_sweep(SweepConfig.from_json(obj))
    b = run_sweep(SweepConfig.from_json(obj))
    assert a.to_json() == b.to_json()
    assert a.pvalue_rows == b.pvalue_rows
    assert [r["condition"] for r in a.rows] == ["benign", "bit"]
    trials = [(r["condition"], r["trial"], r["layer"]) for r in a.pvalue_rows]
    assert trials == sorted(trials, key=lambda t: (t[0] != "benign", t[1], t[2]))
    # fresh attack instance and noise per trial
    bit = [r["p_value"] for r in a.pvalue_rows if r["condition"] == "bit" and r["layer"] == "conv1"]
    assert bit[0] != bit[1]
