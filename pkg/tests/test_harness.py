import json
import math

import numpy as np
import pytest

from cpatta import cli
from cpatta.config import ConfigError, RunConfig, dump_config, from_dict, load_config
from cpatta.classifier import LabeledExample, predict
from cpatta.harness import (
    RECORD_FIELDS,
    BatchRecord,
    RunError,
    build_environment,
    coverage_gap,
    efficiency,
    emit,
    format_efficiency,
    pretrain,
    read_records,
    read_summary,
    run,
)
from cpatta.selection import AnnotationBuffers
from cpatta.stream import Oracle, write_feature_file

SMALL = dict(num_classes=3, feature_dim=4, num_domains=3, batches_per_domain=8, batch_size=16,
             train_per_class=60, calibration_per_class=20, eval_per_domain=60, budget=40)


def small(**kw) -> RunConfig:
    return RunConfig(**{**SMALL, **kw})


def record(i=0, cov_rt=0.9, cov_pre=0.9, tau=0.5, **kw):
    base = dict(
        batch_index=i, domain_id=0, realtime_correct_count=10, batch_size=16, tau_rt=tau, tau_pre=tau,
        pc_rt=0.9, pc_pre=0.8, w_rt=1.0, w_pre=1.0, shift_flag=False, n_human_used=3, n_model_used=3,
        true_coverage_rt=cov_rt, true_coverage_pre=cov_pre,
    )
    base.update(kw)
    return BatchRecord(**base)


class TestMetrics:
    def test_efficiency_examples(self):
        buf = AnnotationBuffers()
        for i in range(10):
            buf.log_h.append(LabeledExample(np.zeros(2), 1, "human", 0, i, 0 if i < 6 else 1))
        oracle = Oracle()
        oracle.register(range(100, 105), [2, 0, 1, 1, 0])
        for i, y in zip(range(100, 105), [2, 0, 1, 1, 0]):
            buf.log_m.append(LabeledExample(np.zeros(2), y, "model", 0, i))
        eff_h, eff_m = efficiency(buf, oracle)
        assert eff_h == pytest.approx(0.6) and eff_m == 1.0

    def test_efficiency_empty(self):
        eff_h, eff_m = efficiency(AnnotationBuffers(), Oracle())
        assert eff_h is None and eff_m is None
        assert format_efficiency(eff_m) == "N/A"
        assert format_efficiency(0.5) == "50.00"

    def test_coverage_gap_examples(self):
        assert coverage_gap([record(cov_rt=0.9, cov_pre=0.9)] * 3, 0.1) == (pytest.approx(0), pytest.approx(0))
        rt, _ = coverage_gap([record(cov_rt=0.8), record(cov_rt=1.0)], 0.1)
        assert rt == pytest.approx(0.1)
        rt, pre = coverage_gap([record(cov_rt=0.85, cov_pre=0.85)], 0.2)
        assert rt == pytest.approx(0.05) and pre == pytest.approx(0.05)
        with pytest.raises(RunError):
            coverage_gap([], 0.1)


class TestEmit:
    def records(self):
        rng = np.random.default_rng(0)
        out = []
        for i in range(100):
            out.append(record(
                i, cov_rt=float(rng.random()), cov_pre=float(rng.random()),
                tau=math.inf if i % 7 == 0 else float(rng.random()), shift_flag=bool(i % 5 == 0),
                pc_rt=float(rng.random()), w_rt=float(rng.random() * 1e3),
                human_ids=[int(v) for v in rng.integers(0, 1000, i % 4)], model_ids=[i],
            ))
        return out

    @pytest.mark.parametrize("fmt", ["jsonl", "csv"])
    def test_round_trip(self, fmt, tmp_path):
        recs = self.records()
        _, summary = run(small(num_domains=1, batches_per_domain=2))
        rec_path, sum_path = emit(recs, summary, tmp_path / "out", fmt)
        assert rec_path.name == f"records.{fmt}"
        assert read_records(rec_path) == recs
        assert read_summary(sum_path) == summary

    def test_jsonl_one_line_per_record(self, tmp_path):
        recs = self.records()
        _, summary = run(small(num_domains=1, batches_per_domain=2))
        rec_path, _ = emit(recs, summary, tmp_path, "jsonl")
        lines = rec_path.read_text().splitlines()
        assert len(lines) == 100
        assert json.loads(lines[0])["tau_rt"] is None

    def test_csv_header(self, tmp_path):
        _, summary = run(small(num_domains=1, batches_per_domain=2))
        rec_path, _ = emit(self.records(), summary, tmp_path, "csv")
        assert rec_path.read_text().splitlines()[0].split(",") == RECORD_FIELDS
        assert RECORD_FIELDS[:15] == [
            "batch_index", "domain_id", "realtime_correct_count", "batch_size", "tau_rt", "tau_pre",
            "pc_rt", "pc_pre", "w_rt", "w_pre", "shift_flag", "n_human_used", "n_model_used",
            "true_coverage_rt", "true_coverage_pre",
        ]

    def test_unwritable_path(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        _, summary = run(small(num_domains=1, batches_per_domain=2))
        with pytest.raises(RunError, match=str(blocker / "sub")):
            emit([], summary, blocker / "sub")


class TestRun:
    def test_invariants(self):
        cfg = small()
        records, summary = run(cfg)
        assert [r.batch_index for r in records] == list(range(24))
        assert summary.budget_used == sum(r.n_human_used for r in records) <= cfg.budget
        for r in records:
            assert 0 <= r.realtime_correct_count <= r.batch_size
            assert 0 <= r.true_coverage_rt <= 1 and 0 <= r.true_coverage_pre <= 1
            assert not set(r.human_ids) & set(r.model_ids)
        for v in (summary.realtime_accuracy, summary.post_adaptation_accuracy, summary.eff_h, summary.eff_m):
            assert 0 <= v <= 1
        assert sorted(summary.post_adaptation_accuracy_per_domain) == [0, 1, 2]
        assert records[0].shift_flag is False

    def test_uniform_weights_are_one(self):
        records, _ = run(small(weighting="uniform"))
        assert all(r.w_rt == 1.0 and r.w_pre == 1.0 for r in records)

    def test_geometric_records_total_weight(self):
        records, _ = run(small(weighting="geometric", rho=0.9))
        n = 3 * 20
        expected = sum(0.9 ** (n + 1 - i) for i in range(1, n + 1))
        assert records[0].w_rt == pytest.approx(expected)

    def test_adaptive_weights_move(self):
        records, _ = run(small(weighting="adaptive"))
        assert records[0].w_rt == 1.0
        assert len({r.w_pre for r in records}) > 1

    def test_shift_uses_escalated_count(self):
        records, _ = run(small(budget=1000, shift_z=0.5))
        flagged = [r for r in records if r.shift_flag]
        assert flagged
        assert all(r.n_human_used == 6 for r in flagged)
        assert all(r.n_human_used == 3 for r in records if not r.shift_flag)

    def test_realtime_predictions_precede_update(self):
        # with a huge learning rate the update would change predictions; the record must not see it
        cfg = small(num_domains=1, batches_per_domain=1, eta_h=50.0, eta_m=50.0)
        records, summary = run(cfg)
        env = build_environment(cfg, 0)
        phi = pretrain(cfg, env, np.random.default_rng(np.random.SeedSequence(0).spawn(2)[0]))
        batch = next(iter(env.batches))
        truth = env.oracle.reveal_for_evaluation(batch.sample_ids)
        assert records[0].realtime_correct_count == int(np.sum(predict(phi, batch.features) == truth))

    def test_reproducible(self):
        a, sa = run(small())
        b, sb = run(small())
        assert a == b and sa == sb
        c, _ = run(small(seed=1))
        assert a != c

    def test_budget_exhaustion(self):
        records, summary = run(small(budget=10))
        assert summary.budget_used == 10
        assert records[-1].n_human_used == 0

    def test_degenerate_no_adaptation(self):
        cfg = small(alpha=0.1, weighting="uniform", selection="random", budget=0, num_domains=1,
                    batches_per_domain=60, domains=[{"rotation": 0.0, "translation": 0.0, "noise_scale": 1.0, "num_batches": 60}])
        records, summary = run(cfg)
        assert summary.budget_used == 0 and summary.eff_h is None and summary.eff_m is None
        assert all(r.n_model_used == 0 for r in records)
        assert abs(summary.realtime_accuracy - summary.pretrained_source_accuracy) < 0.05
        cov = np.mean([r.true_coverage_rt for r in records])
        n = 3 * 20
        assert 0.9 - 0.03 <= cov <= 0.9 + 1 / (n + 1) + 0.03

    def test_random_selection_defaults(self):
        records, summary = run(small(selection="random"))
        assert all(r.n_model_used == 0 for r in records) and summary.eff_m is None
        records, _ = run(small(selection="random", n_model=2))
        assert all(r.n_model_used == 2 for r in records)

    def test_mlp_architecture(self):
        _, summary = run(small(architecture="mlp1", hidden_dim=8))
        assert 0 <= summary.realtime_accuracy <= 1

    def test_file_stream(self, tmp_path):
        rng = np.random.default_rng(0)
        means = rng.normal(0, 3, (3, 4))
        domains = np.repeat([0, 1, 2], 200)
        labels = rng.integers(0, 3, 600)
        X = means[labels] + rng.normal(size=(600, 4)) + 0.5 * domains[:, None]
        path = tmp_path / "feat.csv"
        write_feature_file(path, np.arange(600), labels, domains, np.arange(600), X)
        records, summary = run(RunConfig(stream="file", features=str(path), calibration_per_class=20, batch_size=16, budget=30))
        assert {r.domain_id for r in records} == {1, 2}
        assert sum(r.batch_size for r in records) == 320
        assert sorted(summary.post_adaptation_accuracy_per_domain) == [1, 2]

    def test_k_larger_than_classes(self):
        with pytest.raises(ConfigError):
            run(small(k=5))


class TestConfig:
    def test_defaults(self):
        cfg = RunConfig()
        assert (cfg.alpha, cfg.temperature, cfg.k, cfg.n_human, cfg.budget) == (0.2, 0.1, 1, 3, 300)
        assert cfg.resolved_n_human_shift() == 6 and cfg.resolved_n_model() == 3
        assert RunConfig(selection="random").resolved_n_model() == 0

    def test_validation(self):
        for bad in (dict(alpha=0.0), dict(alpha=1.0), dict(selection="x"), dict(weighting="x"), dict(n_human=0),
                    dict(n_human=4, n_human_shift=3), dict(stream="file"), dict(format="xml"), dict(budget=-1)):
            with pytest.raises(ConfigError):
                RunConfig(**bad).validate()
        with pytest.raises(ConfigError, match="unknown"):
            from_dict({"alpah": 0.1})

    def test_yaml_and_overrides(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("alpha: 0.1\nseed: [1, 2]\nn_human: 4\n")
        cfg = load_config(p, {"alpha": 0.3, "budget": None})
        assert cfg.alpha == 0.3 and cfg.n_human == 4 and cfg.seeds() == [1, 2] and cfg.budget == 300

    def test_dump_round_trip(self, tmp_path):
        cfg = small(alpha=0.15, seed=[3, 4])
        p = tmp_path / "c.yaml"
        p.write_text(dump_config(cfg))
        assert load_config(p) == cfg


class TestCli:
    def test_print_config(self, capsys):
        assert cli.main(["run", "--print-config", "--alpha", "0.3", "--selection", "random"]) == 0
        out = capsys.readouterr().out
        assert "alpha: 0.3" in out and "selection: random" in out and "budget: 300" in out

    def test_run_writes_outputs(self, tmp_path, capsys):
        p = tmp_path / "c.yaml"
        p.write_text("".join(f"{k}: {v}\n" for k, v in SMALL.items()))
        code = cli.main(["run", "--config", str(p), "--seed", "2", "--out", str(tmp_path / "o"), "--format", "csv"])
        assert code == 0
        assert (tmp_path / "o" / "records.csv").exists() and (tmp_path / "o" / "summary.json").exists()
        assert "seed=2" in capsys.readouterr().out

    def test_multi_seed_dirs(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("".join(f"{k}: {v}\n" for k, v in {**SMALL, "num_domains": 1, "seed": [0, 1]}.items()))
        assert cli.main(["run", "--config", str(p), "--out", str(tmp_path / "o")]) == 0
        assert (tmp_path / "o" / "seed_0" / "records.jsonl").exists()
        assert (tmp_path / "o" / "seed_1" / "records.jsonl").exists()

    def test_errors_exit_nonzero(self, tmp_path, capsys):
        assert cli.main(["run", "--alpha", "1.5"]) != 0
        assert "alpha" in capsys.readouterr().err
        assert cli.main(["run", "--stream", "file", "--features", str(tmp_path / "nope.csv")]) != 0
        assert "nope.csv" in capsys.readouterr().err
        assert cli.main(["run", "--config", str(tmp_path / "missing.yaml")]) != 0
