"""
Double GFlowNet 学習ループのテスト
"""

import numpy as np
import pytest

from DoubleGFN.autodiff import AdamState
from DoubleGFN.checkpoint import checkpoint_paths, latest_checkpoint, load_checkpoint
from DoubleGFN.config import ExperimentConfig, TrainerConfig, load_preset
from DoubleGFN.environment import Hypergrid
from DoubleGFN.policy import PolicySet
from DoubleGFN.trainer import DGFNTrainer, TargetState, sampling_policy, should_update_target, train_step
from DoubleGFN.utils import ConfigHashMismatchError, FileUtils, TrainingAbort


def tiny_experiment(**trainer) -> ExperimentConfig:
    settings = {
        'algorithm': 'DGFN', 'objective': 'tb', 'initial_phase': 4, 'update_period': 3, 'alpha': 0.5,
        'batch_size': 8, 'total_steps': 20, 'hidden_dim': 16, 'metric_every': 5, 'checkpoint_every': 10,
    }
    settings.update(trainer)
    return ExperimentConfig.from_dict({
        'name': 'tiny',
        'seeds': [0],
        'env': {'dim': 2, 'side': 8},
        'trainer': settings,
        'metrics': {'window_size': 500, 'top_k': 5},
    })


class TestSchedule:

    def test_worked_examples(self):
        config = TrainerConfig(initial_phase=698, update_period=137)
        assert should_update_target(5, config)
        assert not should_update_target(700, config)
        assert should_update_target(822, config)

    def test_initial_phase_boundary(self):
        config = TrainerConfig(initial_phase=10, update_period=7)
        assert should_update_target(9, config)
        assert not should_update_target(10, config)
        assert should_update_target(14, config)

    def test_step_index_starts_at_one(self):
        with pytest.raises(ValueError):
            should_update_target(0, TrainerConfig())


class TestTrainStep:

    @pytest.fixture
    def setup(self):
        experiment = tiny_experiment(initial_phase=0, update_period=5)
        env = Hypergrid(experiment.env)
        online = PolicySet.initialize(env, np.random.default_rng(0), 16, 2, 0.01)
        target = TargetState(PolicySet.initialize(env, np.random.default_rng(1), 16, 2, 0.01), 0)
        return experiment.trainer, env, online, target

    def test_gfn_samples_with_online(self, setup):
        _, _, online, target = setup
        assert sampling_policy(online, None) is online
        assert sampling_policy(online, target) is target.policy

    def test_target_unchanged_off_schedule(self, setup):
        config, env, online, target = setup
        before = target.policy.copy()
        _, updated, _, _ = train_step(online, target, config, env, np.random.default_rng(0), AdamState(), 3)
        assert updated.policy.equals(before)
        assert updated.last_update == 0

    def test_target_updated_on_schedule(self, setup):
        config, env, online, target = setup
        before = target.policy.copy()
        online, updated, _, _ = train_step(online, target, config, env, np.random.default_rng(0), AdamState(), 5)
        assert not updated.policy.equals(before)
        assert updated.last_update == 5
        expected = 0.5 * online.params['logZ'] + 0.5 * before.params['logZ']
        assert updated.policy.params['logZ'][0] == pytest.approx(expected[0])

    def test_batch_depends_only_on_target(self, setup):
        config, env, online, target = setup
        other = online.copy()
        for value in other.params.values():
            value += 0.3
        _, _, _, first = train_step(online, target, config, env, np.random.default_rng(7), AdamState(), 3)
        _, _, _, second = train_step(other, target, config, env, np.random.default_rng(7), AdamState(), 3)
        assert [t.states for t in first] == [t.states for t in second]

    def test_online_is_updated(self, setup):
        config, env, online, target = setup
        before = online.copy()
        updated, _, report, trajectories = train_step(online, target, config, env, np.random.default_rng(0),
                                                      AdamState(), 3)
        assert not updated.equals(before)
        assert len(trajectories) == config.batch_size
        assert report.residuals.shape == (config.batch_size,)


class TestTrainer:

    def test_trajectory_count(self, tmp_path):
        summary = DGFNTrainer(tiny_experiment(), 0, tmp_path / "run").run()
        assert summary['steps'] == 20
        assert summary['trajectories'] == 160
        rows = FileUtils.read_csv(tmp_path / "run" / "metrics.csv")
        assert [int(r['step']) for r in rows] == [5, 10, 15, 20]
        assert summary['total_modes'] == 4

    def test_reduces_to_baseline(self, tmp_path):
        gfn = tiny_experiment(algorithm='GFN')
        dgfn = tiny_experiment(algorithm='DGFN', initial_phase=0, update_period=1, alpha=1.0)
        DGFNTrainer(gfn, 3, tmp_path / "gfn").run()
        DGFNTrainer(dgfn, 3, tmp_path / "dgfn").run()
        gfn_bytes = (tmp_path / "gfn" / "metrics.csv").read_bytes()
        assert gfn_bytes == (tmp_path / "dgfn" / "metrics.csv").read_bytes()

    def test_same_seed_same_outputs(self, tmp_path):
        experiment = tiny_experiment(objective='subtb')
        DGFNTrainer(experiment, 2, tmp_path / "a").run()
        DGFNTrainer(experiment, 2, tmp_path / "b").run()
        for name in ("metrics.csv", "metrics.jsonl", "summary.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_different_seeds_differ(self, tmp_path):
        experiment = tiny_experiment()
        DGFNTrainer(experiment, 0, tmp_path / "a").run()
        DGFNTrainer(experiment, 1, tmp_path / "b").run()
        assert (tmp_path / "a" / "metrics.csv").read_bytes() != (tmp_path / "b" / "metrics.csv").read_bytes()

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        experiment = tiny_experiment()
        DGFNTrainer(experiment, 0, tmp_path / "full").run()
        DGFNTrainer(experiment, 0, tmp_path / "resumed").run()

        # 最終チェックポイントを消して途中 (step 10) から再開
        for path in checkpoint_paths(tmp_path / "resumed" / "checkpoints", 20):
            path.unlink()
        trainer = DGFNTrainer(experiment, 0, tmp_path / "resumed")
        trainer.run(resume=True)

        for name in ("metrics.csv", "metrics.jsonl", "summary.json"):
            assert (tmp_path / "full" / name).read_bytes() == (tmp_path / "resumed" / name).read_bytes()

    def test_checkpoint_contents(self, tmp_path):
        experiment = tiny_experiment()
        trainer = DGFNTrainer(experiment, 0, tmp_path / "run")
        trainer.run()
        manifest = latest_checkpoint(trainer.checkpoint_dir)
        data = load_checkpoint(manifest, expected_hash=experiment.config_hash())
        assert data.step == 20
        assert data.online.equals(trainer.online)
        assert data.target.equals(trainer.target.policy)
        assert data.adam.t == 20
        with pytest.raises(ConfigHashMismatchError):
            load_checkpoint(manifest, expected_hash="0" * 16)

    def test_summary_jsonl_carries_hash(self, tmp_path):
        experiment = tiny_experiment()
        DGFNTrainer(experiment, 0, tmp_path / "run").run()
        summary = FileUtils.read_json(tmp_path / "run" / "summary.json")
        assert summary['config_hash'] == experiment.config_hash()
        assert summary['label'] == "DGFN-TB"
        assert summary['final']['oracle_l1'] is not None
        header = FileUtils.read_csv_header(tmp_path / "run" / "metrics.csv")
        assert 'config_hash' not in header

    def test_fresh_run_clears_previous_outputs(self, tmp_path):
        run_dir = tmp_path / "run"
        DGFNTrainer(tiny_experiment(), 0, run_dir).run()
        shorter = tiny_experiment(total_steps=4)
        DGFNTrainer(shorter, 0, run_dir).run()

        assert sorted(p.name for p in (run_dir / "checkpoints").glob("step_*.json")) == ["step_4.json"]
        data = load_checkpoint(latest_checkpoint(run_dir / "checkpoints"), expected_hash=shorter.config_hash())
        assert data.step == 4
        assert FileUtils.read_json(run_dir / "summary.json")['config_hash'] == shorter.config_hash()

    def test_non_finite_loss_dumps_residuals(self, tmp_path):
        experiment = tiny_experiment()
        trainer = DGFNTrainer(experiment, 0, tmp_path / "run")
        trainer.online.params['logZ'][0] = np.nan
        with pytest.raises(TrainingAbort) as info:
            trainer.run()

        assert info.value.step == 1
        assert len(info.value.residuals) == 8
        assert np.isnan(info.value.residuals).all()
        assert "残差 (8 本)" in str(info.value)
        dump = FileUtils.read_json(tmp_path / "run" / "abort.json")
        assert dump['step'] == 1
        assert dump['residuals'] == ['nan'] * 8
        assert dump['config_hash'] == experiment.config_hash()

    def test_progress_callback(self, tmp_path):
        calls = []
        DGFNTrainer(tiny_experiment(), 0, tmp_path / "run",
                    progress_callback=lambda p, s, d: calls.append(p)).run()
        assert calls == [25.0, 50.0, 75.0, 100.0]


@pytest.mark.slow
class TestDeskScale:

    @pytest.mark.parametrize('preset', ['hypergrid-desk-gfn-tb', 'hypergrid-desk-dgfn-tb'])
    def test_learns_target(self, tmp_path, preset):
        experiment = load_preset(preset)
        passed = 0
        for seed in experiment.seeds:
            summary = DGFNTrainer(experiment, seed, tmp_path / f"seed_{seed}").run()
            if summary['final']['oracle_l1'] < 0.05 and summary['final']['modes'] == 4:
                passed += 1
        assert passed >= 4
