import asyncio
import csv

import pytest

from core.errors import AcceptanceFailure, ConfigError, MissingArtifactError
from core.experiment_file import dump_experiment_config, expand_dotted, load_experiment_config, parse_overrides
from core.models import (
    ApplySite, Arm, ArmRun, ProtocolResult, RunManifest, SweepPoint, TaskKind, TaskMetrics
)
from core.orchestrator import (
    ExperimentOrchestrator, check_protocol, check_sweep, paired_test, protocol_tests, summarize
)
from storage.artifacts import ArtifactStore


# ========== Config files ==========

def test_expand_dotted():
    assert expand_dotted({"a.b.c": "1", "a.d": " x ", "e": "none"}) == {"a": {"b": {"c": "1"}, "d": "x"}, "e": None}
    with pytest.raises(ConfigError):
        expand_dotted({"a": "1", "a.b": "2"})
    with pytest.raises(ConfigError):
        expand_dotted({"a.b": "1", "a": "2"})
    with pytest.raises(ConfigError):
        expand_dotted({"a..b": "1"})


def test_parse_overrides():
    assert parse_overrides(["model.d_model=32", "peft.targets=fc1,fc2"]) == {"model.d_model": "32", "peft.targets": "fc1,fc2"}
    with pytest.raises(ConfigError):
        parse_overrides(["model.d_model"])


def test_load_config_file(tmp_path):
    path = tmp_path / "run.env"
    path.write_text("model.d_model = 32\nseeds = 1,2\npeft.kind = adapter\n", encoding="utf-8")
    experiment = load_experiment_config(path, {"model.d_model": "48"})
    assert experiment.model.d_model == 48
    assert experiment.seeds == [1, 2]
    assert experiment.peft.kind.value == "adapter"
    assert experiment.transpeft.p_i == 0.05 and experiment.transpeft.p_c == 0.2


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        load_experiment_config(overrides={"model.widht": "3"})
    with pytest.raises(ConfigError):
        load_experiment_config(overrides={"transpeft.p_c": "1.0"})
    with pytest.raises(MissingArtifactError):
        load_experiment_config(tmp_path / "absent.env")


def test_config_dump_loads_back(tmp_path, small_experiment):
    experiment = small_experiment(tmp_path, **{"peft.targets": "fc1,fc2", "finetune.algorithm": "sgd"})
    path = tmp_path / "dumped.env"
    path.write_text(dump_experiment_config(experiment), encoding="utf-8")
    assert load_experiment_config(path) == experiment


# ========== Artifact store ==========

def test_json_is_deterministic(tmp_path):
    store = ArtifactStore(tmp_path)
    a = store.write_json("a.json", {"b": 1, "a": [TaskMetrics(loss=0.5, accuracy=1.0, n_examples=2)]})
    b = store.write_json("nested/b.json", {"a": [TaskMetrics(loss=0.5, accuracy=1.0, n_examples=2)], "b": 1})
    assert a.read_bytes() == b.read_bytes()
    assert store.read_json("a.json")["a"][0]["accuracy"] == 1.0
    with pytest.raises(MissingArtifactError):
        store.read_json("absent.json")


def test_csv_columns_keep_their_order(tmp_path):
    store = ArtifactStore(tmp_path)
    path = store.write_csv("t.csv", ["b", "a"], [{"a": 1, "b": 2, "extra": 3}, {"b": 4}])
    assert path.read_text(encoding="utf-8") == "b,a\n2,1\n4,\n"


def test_manifest_round_trip(tmp_path):
    store = ArtifactStore(tmp_path)
    manifest = RunManifest(command="pretrain", config={}, seeds=[1], precision="float64", fingerprints={"m0": "ab"})
    path = store.write_manifest(manifest)
    assert path.name == "manifest_pretrain.json"
    assert ArtifactStore.load_manifest(path) == manifest
    (tmp_path / "bad.json").write_text("{}", encoding="utf-8")
    with pytest.raises(ConfigError):
        ArtifactStore.load_manifest(tmp_path / "bad.json")
    with pytest.raises(MissingArtifactError):
        ArtifactStore.load_manifest(tmp_path / "absent.json")


# ========== Statistics ==========

def _run(arm: Arm, seed: int, accuracy: float) -> ArmRun:
    return ArmRun(
        arm=arm, seed=seed, task=TaskKind.MOD_ADD,
        metrics=TaskMetrics(loss=1.0 - accuracy, accuracy=accuracy, n_examples=100),
        peft_fingerprint="p", base_fingerprints={"train": "a", "eval": "b"},
    )


def _protocol(trans_peft_lift):
    runs = []
    for seed, noise in zip((1, 2, 3, 4), (0.0, 0.01, -0.01, 0.02)):
        runs += [
            _run(Arm.FINETUNE_O, seed, 0.9 + noise),
            _run(Arm.FINETUNE_N, seed, 0.9 - noise),
            _run(Arm.DIRECT_TRANSFER, seed, 0.5 + noise),
            _run(Arm.TRANS_PEFT, seed, 0.5 + trans_peft_lift + 2 * noise),
        ]
    tests, gap = protocol_tests(runs)
    return ProtocolResult(runs=runs, summaries=summarize(runs), tests=tests, gap_recovery=gap)


def test_summaries_and_gap():
    result = _protocol(0.3)
    by_arm = {s.arm: s for s in result.summaries}
    assert by_arm[Arm.FINETUNE_N].n_seeds == 4
    assert by_arm[Arm.DIRECT_TRANSFER].mean_accuracy == pytest.approx(0.505)
    assert result.gap_recovery == pytest.approx((0.81 - 0.505) / (0.895 - 0.505))
    check_protocol(result)


def test_protocol_check_fails_without_lift():
    with pytest.raises(AcceptanceFailure):
        check_protocol(_protocol(0.0))
    with pytest.raises(AcceptanceFailure):
        check_protocol(_protocol(0.05))


def test_paired_test_of_identical_arms():
    test = paired_test([0.5, 0.6], [0.5, 0.6], Arm.TRANS_PEFT, Arm.DIRECT_TRANSFER)
    assert test.mean_difference == 0.0
    assert test.p_value is None


def _point(p_i, p_c, site, seed, accuracy) -> SweepPoint:
    return SweepPoint(p_i=p_i, p_c=p_c, apply_site=site, seed=seed, loss=1.0 - accuracy, accuracy=accuracy)


def test_rate_sweep_check():
    curve = {0.0: 0.5, 0.1: 0.6, 0.2: 0.65, 0.3: 0.6, 0.5: 0.4}
    check_sweep("p_c", [_point(0.0, p_c, ApplySite.FFN, 1, acc) for p_c, acc in curve.items()])
    flat = {**curve, 0.5: 0.7}
    with pytest.raises(AcceptanceFailure):
        check_sweep("p_c", [_point(0.0, p_c, ApplySite.FFN, 1, acc) for p_c, acc in flat.items()])
    with pytest.raises(ConfigError):
        check_sweep("p_i", [])


def test_site_sweep_check():
    base = {1: 0.50, 2: 0.52, 3: 0.48, 4: 0.51, 5: 0.49}
    lift = {1: 0.10, 2: 0.12, 3: 0.09, 4: 0.11, 5: 0.10}
    points = [_point(0.0, 0.0, ApplySite.FFN, s, a) for s, a in base.items()]
    points += [_point(0.05, 0.2, ApplySite.FFN, s, base[s] + lift[s]) for s in base]
    points += [_point(0.05, 0.2, ApplySite.ATTENTION, s, base[s] - 0.01 * s) for s in base]
    check_sweep("site", points)

    attention_wins = [p for p in points if p.apply_site != ApplySite.ATTENTION or p.p_c == 0.0]
    attention_wins += [_point(0.05, 0.2, ApplySite.ATTENTION, s, base[s] + lift[s]) for s in base]
    with pytest.raises(AcceptanceFailure):
        check_sweep("site", attention_wins)


# ========== Orchestrator ==========

def test_pipeline_end_to_end(tmp_path, small_experiment):
    experiment = small_experiment(tmp_path)
    orchestrator = ExperimentOrchestrator(experiment, output_dir=tmp_path)
    m0_path, fingerprint = asyncio.run(orchestrator.pretrain())
    assert m0_path.exists()
    assert ArtifactStore.load_manifest(tmp_path / "manifest_pretrain.json").fingerprints == {"m0": fingerprint}

    pair = asyncio.run(orchestrator.update())
    assert pair.m0_fingerprint == fingerprint != pair.m1_fingerprint
    assert orchestrator.load_pair() == pair

    result = asyncio.run(orchestrator.run_protocol(pair))
    assert len(result.runs) == len(Arm) * len(experiment.seeds)
    for run in result.runs:
        expected_eval = pair.m0_fingerprint if run.arm == Arm.FINETUNE_O else pair.m1_fingerprint
        assert run.base_fingerprints["eval"] == expected_eval
    with (tmp_path / "protocol" / "arms.csv").open(encoding="utf-8") as handle:
        assert len(list(csv.DictReader(handle))) == len(result.runs)

    summary = orchestrator.report()
    assert summary["n_runs"] == len(result.runs)
    assert (tmp_path / "report.json").exists()


def test_identical_versions_make_transfer_trivial(tmp_path, small_experiment):
    experiment = small_experiment(tmp_path, seeds="42")
    orchestrator = ExperimentOrchestrator(experiment, output_dir=tmp_path)
    m0_path, _ = asyncio.run(orchestrator.pretrain())
    pair = orchestrator.pair_from_checkpoints(m0_path, m0_path)
    assert pair.epsilon_att == pair.rho == 0.0

    result = asyncio.run(orchestrator.run_protocol(pair, [Arm.FINETUNE_O, Arm.DIRECT_TRANSFER]))
    by_arm = {run.arm: run.metrics for run in result.runs}
    assert by_arm[Arm.DIRECT_TRANSFER] == by_arm[Arm.FINETUNE_O]


def test_parallel_jobs_match_inline(tmp_path, small_experiment):
    outputs = {}
    for jobs in (1, 2):
        out = tmp_path / f"jobs_{jobs}"
        orchestrator = ExperimentOrchestrator(small_experiment(out), output_dir=out, jobs=jobs)
        asyncio.run(orchestrator.pretrain())
        outputs[jobs] = [r.metrics["base"] for r in asyncio.run(orchestrator.finetune())]
    assert outputs[1] == outputs[2]


def test_sweep_grids(tmp_path, small_experiment):
    orchestrator = ExperimentOrchestrator(small_experiment(tmp_path), output_dir=tmp_path)
    masking = orchestrator.sweep_grid("p_i")
    assert [cfg.p_i for cfg in masking] == [0.0, 0.01, 0.05, 0.1, 0.5]
    assert all(cfg.p_c == 0.2 and cfg.apply_site == ApplySite.FFN for cfg in masking)
    dropping = orchestrator.sweep_grid("p_c")
    assert [cfg.p_c for cfg in dropping] == [0.0, 0.1, 0.2, 0.3, 0.5]
    assert all(cfg.p_i == 0.0 for cfg in dropping)


def test_sweep_analysis_and_bound(tmp_path, small_experiment):
    experiment = small_experiment(tmp_path, seeds="42")
    orchestrator = ExperimentOrchestrator(experiment, output_dir=tmp_path)
    asyncio.run(orchestrator.pretrain())
    pair = asyncio.run(orchestrator.update())

    points = asyncio.run(orchestrator.sweep(pair, "site"))
    assert {p.apply_site for p in points} == set(ApplySite)
    assert (tmp_path / "fig8_ablation.csv").exists()
    with pytest.raises(ConfigError):
        orchestrator.sweep_grid("depth")

    summary = asyncio.run(orchestrator.analyze(pair))
    assert 0.0 <= summary["sign_agreement"] <= 1.0
    for name in ("fig1_attn_similarity.csv", "fig2_ffn_similarity.csv", "fig3_influence.csv"):
        assert (tmp_path / name).exists()

    reports = asyncio.run(orchestrator.bound_report(pair))
    assert set(reports) == {Arm.TRANS_PEFT.value, Arm.DIRECT_TRANSFER.value}
    assert reports[Arm.TRANS_PEFT.value][0].epsilon_att == pair.epsilon_att
