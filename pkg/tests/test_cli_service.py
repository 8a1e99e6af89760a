import json
from pathlib import Path

import numpy as np
import pytest
from fastapi.testclient import TestClient

from confplan import conformal, encoding, evaluation, policy
from confplan.cli import main
from confplan.config import ConfigError, RunConfig
from confplan.encoding import FEATURE_DIM
from confplan.evaluation import OracleGuide, rollout
from confplan.gridworld import sample_scenario
from confplan.service import make_app
from confplan.training import CurriculumSchedule, LossConfig, TrainConfig


def tiny_config(tmp_path, **overrides):
    cfg = RunConfig(
        n_train=8,
        n_cal=6,
        n_val=4,
        alpha=0.2,
        loss=LossConfig(method="ua"),
        train=TrainConfig(
            refresh_period=2,
            epochs=2,
            batch_size=16,
            seed=0,
            hidden=(16,),
            curriculum=CurriculumSchedule(
                phase_start_epochs=(1, 2, 3, 4), retained_per_phase=(4, 4, 4, 4)
            ),
        ),
        seeds=(0,),
        out_dir=str(tmp_path / "runs"),
    )
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


class TestRunConfig:
    def test_round_trip_identity(self):
        cfg = RunConfig(alpha=0.1, seeds=(3, 4), loss=LossConfig(method="conftr"))
        again = RunConfig.from_json(cfg.to_json())
        assert again == cfg

    def test_defaults_mirror_protocol(self):
        cfg = RunConfig()
        assert (cfg.n_train, cfg.n_cal, cfg.n_val) == (4000, 400, 400)
        assert cfg.alpha == 0.05
        assert cfg.train.refresh_period == 10
        assert cfg.train.curriculum.phase_start_epochs == (1, 6, 11, 21)
        assert cfg.train.curriculum.retained_per_phase == (100, 100, 500, 1000)
        assert cfg.loss.conftr_sharpness == 0.1
        assert len(cfg.seeds) == 3

    def test_invalid_values_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig(alpha=1.5)
        with pytest.raises(ConfigError):
            RunConfig(n_train=0)
        with pytest.raises(ConfigError):
            RunConfig.from_json("[]")
        with pytest.raises(ConfigError):
            RunConfig.from_json("{not json")


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """gen-data then train twice (ua and cp-weight 0) with a tiny config."""
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_config(root)
    cfg_path = root / "config.json"
    cfg_path.write_text(cfg.to_json())
    assert main(["gen-data", "--config", str(cfg_path), "--seed", "1", "--out", str(root)]) == 0
    data_dir = root / "data"
    assert (data_dir / "train_manifest.jsonl").exists()
    assert main(
        ["train", "--config", str(cfg_path), "--data", str(data_dir), "--method", "ua", "--out", str(root / "runs")]
    ) == 0
    assert main(
        [
            "train", "--config", str(cfg_path), "--data", str(data_dir),
            "--method", "cofinellm", "--lambda", "0", "--out", str(root / "runs"),
        ]
    ) == 0
    return root, cfg_path, data_dir


class TestCLI:
    def test_gen_data_outputs(self, workspace):
        root, _, data_dir = workspace
        manifest = json.loads((data_dir / "datasets_manifest.json").read_text())
        assert set(manifest["splits"]) == {"train", "cal", "val"}
        assert manifest["splits"]["train"]["n_scenarios"] == 8
        seeds = {info["stream_seed"] for info in manifest["splits"].values()}
        assert len(seeds) == 3  # disjoint streams
        assert manifest["base_seed"] == 1

    def test_ua_and_zero_weight_checkpoints_identical(self, workspace):
        root, _, _ = workspace
        a, _, _, _ = policy.load_checkpoint(root / "runs" / "ua-seed0" / "ckpt_final.npz")
        b, _, _, _ = policy.load_checkpoint(root / "runs" / "cofinellm-seed0" / "ckpt_final.npz")
        for wa, wb in zip(a.weights, b.weights):
            assert np.array_equal(wa, wb)
        for ba, bb in zip(a.biases, b.biases):
            assert np.array_equal(ba, bb)

    def test_train_writes_run_artifacts(self, workspace):
        root, _, _ = workspace
        run = root / "runs" / "ua-seed0"
        assert (run / "config.json").exists()
        assert (run / "metrics.jsonl").exists()
        assert (run / "threshold.json").exists()
        th = json.loads((run / "threshold.json").read_text())
        assert {"alpha", "delta", "q_hat", "calib_size", "v"} <= set(th)

    def test_calibrate_and_eval(self, workspace):
        root, cfg_path, data_dir = workspace
        ckpt = root / "runs" / "ua-seed0" / "ckpt_final.npz"
        out = root / "calib.json"
        assert main(
            [
                "calibrate", "--config", str(cfg_path), "--checkpoint", str(ckpt),
                "--data", str(data_dir), "--out", str(out),
            ]
        ) == 0
        report = json.loads(out.read_text())
        assert report["calib_size"] == 6
        assert main(
            [
                "eval", "--config", str(cfg_path), "--checkpoint", str(ckpt),
                "--data", str(data_dir), "--out", str(root / "runs" / "ua-seed0"),
            ]
        ) == 0
        eval_report = json.loads((root / "runs" / "ua-seed0" / "eval" / "report.json").read_text())
        assert eval_report["n_scenarios"] == 4
        assert (root / "runs" / "ua-seed0" / "eval" / "table.md").exists()

    def test_sweep_alpha(self, workspace):
        root, cfg_path, data_dir = workspace
        ckpt = root / "runs" / "ua-seed0" / "ckpt_final.npz"
        assert main(
            [
                "sweep-alpha", "--config", str(cfg_path), "--checkpoint", str(ckpt),
                "--data", str(data_dir), "--alphas", "0.3,0.2", "--out", str(root / "runs"),
            ]
        ) == 0
        table = (root / "runs" / "sweep_alpha" / "table.md").read_text()
        assert "coverage 0.70" in table and "coverage 0.80" in table

    def test_sweep_lambda(self, workspace):
        root, cfg_path, data_dir = workspace
        assert main(
            [
                "sweep-lambda", "--config", str(cfg_path), "--data", str(data_dir),
                "--values", "0.1,0.3", "--out", str(root / "runs"),
            ]
        ) == 0
        out_dir = root / "runs" / "sweep_lambda"
        assert (out_dir / "report_lambda_0.1.json").exists()
        assert (out_dir / "report_lambda_0.3.json").exists()
        assert "cp_weight=0.1" in (out_dir / "table.md").read_text()

    def test_eval_ood(self, workspace):
        root, cfg_path, data_dir = workspace
        ckpt = root / "runs" / "ua-seed0" / "ckpt_final.npz"
        assert main(
            [
                "eval-ood", "--config", str(cfg_path), "--checkpoint", str(ckpt),
                "--data", str(data_dir), "--n-ood", "3", "--out", str(root / "runs"),
            ]
        ) == 0
        report = json.loads((root / "runs" / "eval_ood" / "report.json").read_text())
        assert report["n_scenarios"] == 3

    def test_rollout_debug(self, workspace, capsys):
        root, cfg_path, _ = workspace
        assert main(
            [
                "rollout", "--config", str(cfg_path), "--uniform", "--delta", "0.1",
                "--scenario-seed", "3", "--compact",
            ]
        ) == 0
        payload = json.loads(capsys.readouterr().out)
        assert payload["outcome"] in ("success", "failure", "halted")
        assert payload["steps"]

    def test_unknown_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 2

    def test_invalid_config_exits_3(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"alpha": 7}')
        code = main(["gen-data", "--config", str(bad)])
        assert code == 3
        err = json.loads(capsys.readouterr().err)
        assert err["error"] == "config"

    def test_missing_checkpoint_exits_nonzero(self, tmp_path, capsys):
        code = main(
            ["eval", "--checkpoint", str(tmp_path / "none.npz"), "--data", str(tmp_path)]
        )
        assert code == 1
        assert json.loads(capsys.readouterr().err)["error"]


@pytest.fixture(scope="module")
def service_setup():
    params = policy.zero_params(FEATURE_DIM, hidden=(8,))
    cal = encoding.build_dataset(6, "D", rng_seed=404)
    threshold = conformal.calibrate(params, cal, alpha=0.2)

    def scenario_source(seed):
        return sample_scenario(7000 + (seed or 0), "D")

    app = make_app(params, threshold, scenario_source)
    return params, threshold, scenario_source, TestClient(app)


class TestService:
    def test_session_lifecycle_and_snapshot(self, service_setup):
        _, _, _, client = service_setup
        created = client.post("/sessions", json={"seed": 1}).json()
        assert created["v"] == 1
        sid = created["session_id"]
        snap = client.get(f"/sessions/{sid}").json()
        assert snap["status"] == "awaiting_help"  # uniform policy: full sets
        assert snap["pending_help"]["prediction_set"] == list(range(6))
        assert snap["pending_help"]["prompt_text"].startswith("Select an action")
        assert snap["grid"]["width"] == 8

    def test_unknown_session_404(self, service_setup):
        _, _, _, client = service_setup
        assert client.get("/sessions/nope").status_code == 404

    def test_websocket_help_flow_validation(self, service_setup):
        params, threshold, source, client = service_setup
        sid = client.post("/sessions", json={"seed": 2}).json()["session_id"]
        with client.websocket_connect(f"/sessions/{sid}/ws") as ws:
            state = ws.receive_json()
            assert state["type"] == "state_update"
            req = ws.receive_json()
            assert req["type"] == "help_request"
            assert req["delta"] == threshold.delta
            assert len(req["confidences"]) == 6

            # invalid: action outside the set (set is full here, so use step staleness)
            ws.send_json({"v": 1, "type": "choose_action", "step": req["step"] + 5, "action_index": 0})
            event = ws.receive_json()
            assert event["type"] == "validation"
            assert event["reason"] == "stale step index"

            # invalid action index type
            ws.send_json({"v": 1, "type": "choose_action", "step": req["step"], "action_index": "zero"})
            assert ws.receive_json()["type"] == "validation"

            # valid choice advances the rollout
            ws.send_json({"v": 1, "type": "choose_action", "step": req["step"], "action_index": req["prediction_set"][0]})
            follow = ws.receive_json()
            assert follow["type"] == "state_update"
            assert follow["step"] == req["step"] + 1

    def test_out_of_set_action_rejected(self, service_setup):
        # A trained-ish policy is not needed: craft a threshold that filters
        # actions so the set is partial, then try an excluded action.
        params = policy.zero_params(FEATURE_DIM, hidden=(8,))

        class Biased:
            def confidences(self, env, task, history, t, features):
                return np.array([0.4, 0.4, 0.05, 0.05, 0.05, 0.05])

        threshold = conformal.Threshold(delta=0.3, alpha=0.2, calib_size=6, quantile_value=0.7)
        app = make_app(Biased(), threshold, lambda seed: sample_scenario(7100, "D"))
        client = TestClient(app)
        sid = client.post("/sessions", json={}).json()["session_id"]
        with client.websocket_connect(f"/sessions/{sid}/ws") as ws:
            assert ws.receive_json()["type"] == "state_update"
            req = ws.receive_json()
            assert req["prediction_set"] == [0, 1]
            ws.send_json({"v": 1, "type": "choose_action", "step": req["step"], "action_index": 3})
            event = ws.receive_json()
            assert event["type"] == "validation"
            assert event["reason"] == "action outside the prediction set"
            # state unchanged: the same help request is still pending
            snap = client.get(f"/sessions/{sid}").json()
            assert snap["status"] == "awaiting_help"
            assert snap["pending_help"]["step"] == req["step"]

    def test_abort_finishes_session(self, service_setup):
        _, _, _, client = service_setup
        sid = client.post("/sessions", json={"seed": 3}).json()["session_id"]
        with client.websocket_connect(f"/sessions/{sid}/ws") as ws:
            ws.receive_json()
            ws.receive_json()
            ws.send_json({"v": 1, "type": "abort"})
            state = ws.receive_json()
            fin = ws.receive_json()
            assert fin["type"] == "finished"
            assert fin["outcome"] == "aborted"

    def test_scripted_truth_client_matches_oracle_rollout(self, service_setup):
        params, threshold, source, client = service_setup
        for seed in range(4, 10):
            scenario = source(seed)
            oracle_trace = rollout(params, threshold, scenario)
            helper_actions = {
                s.t: s.executed for s in oracle_trace.steps if s.source == "helper"
            }
            sid = client.post("/sessions", json={"seed": seed}).json()["session_id"]
            outcome = None
            with client.websocket_connect(f"/sessions/{sid}/ws") as ws:
                while True:
                    event = ws.receive_json()
                    if event["type"] == "finished":
                        outcome = event
                        break
                    if event["type"] == "help_request":
                        ws.send_json(
                            {
                                "v": 1,
                                "type": "choose_action",
                                "step": event["step"],
                                "action_index": helper_actions[event["step"]],
                            }
                        )
            assert outcome["outcome"] == oracle_trace.outcome
            assert outcome["steps_taken"] == oracle_trace.steps_taken
