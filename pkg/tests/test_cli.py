import json

import pytest

from cli import build_parser, main, parse_arms
from core.errors import ConfigError
from core.models import Arm
from storage.artifacts import ArtifactStore


@pytest.fixture
def settings(small_run):
    """--output plus one --set per small-run override."""
    def argv(output) -> list:
        flags = ["--output", str(output)]
        for key, value in small_run.items():
            flags += ["--set", f"{key}={value}"]
        return flags
    return argv


@pytest.fixture
def trained(tmp_path, settings):
    """An output directory holding M0 and M1."""
    assert main(["pretrain", *settings(tmp_path)]) == 0
    assert main(["update", *settings(tmp_path)]) == 0
    return tmp_path


def test_parser_defaults():
    args = build_parser().parse_args(["sweep"])
    assert args.grid == "p_c" and not args.assert_
    assert args.overrides == []
    assert build_parser().parse_args(["bound-report"]).draws is None


def test_parse_arms():
    assert parse_arms("trans_peft, direct_transfer") == [Arm.TRANS_PEFT, Arm.DIRECT_TRANSFER]
    with pytest.raises(ConfigError):
        parse_arms("trans_peft,fine_tune")


def test_exit_codes(tmp_path, settings):
    assert main(["report", "--output", str(tmp_path)]) == 0
    assert main(["pretrain", "--output", str(tmp_path), "--set", "model.bogus=1"]) == 2
    assert main(["transfer-eval", "--output", str(tmp_path),
                 "--peft", str(tmp_path / "absent.ckpt"), "--target", str(tmp_path / "m0.ckpt")]) == 3
    assert main(["update", *settings(tmp_path)]) == 3


def test_stage_commands(trained, settings):
    manifest = ArtifactStore.load_manifest(trained / "manifest_update.json")
    assert set(manifest.fingerprints) == {"m0", "m1"}
    assert manifest.data["arguments"]["m0"] == str(trained / "m0.ckpt")

    assert main(["finetune", *settings(trained)]) == 0
    peft = trained / "finetune" / "seed_42" / "peft.ckpt"
    assert peft.exists()
    assert main(["transfer-eval", *settings(trained), "--peft", str(peft), "--target", str(trained / "m1.ckpt")]) == 0
    result = json.loads((trained / "transfer_eval" / "metrics.json").read_text(encoding="utf-8"))
    assert result["transfer"]["target_fingerprint"] == manifest.fingerprints["m1"]

    assert main(["protocol", *settings(trained), "--arms", "finetune_o,direct_transfer"]) == 0
    assert main(["protocol", *settings(trained), "--arms", "nope"]) == 2
    assert main(["sweep", *settings(trained), "--grid", "p_i", "--assert"]) == 2
    assert main(["report", "--output", str(trained)]) == 0
    assert json.loads((trained / "report.json").read_text(encoding="utf-8"))["n_runs"] == 4


def test_replay_reproduces_metrics(trained, settings, tmp_path_factory):
    assert main(["finetune", *settings(trained), "--transpeft"]) == 0
    replay = tmp_path_factory.mktemp("replay")
    argv = ["finetune", "--from-manifest", str(trained / "manifest_finetune.json"), "--output", str(replay)]
    assert main(argv) == 0

    for seed in (42, 1):
        original = trained / "finetune" / f"seed_{seed}" / "metrics.json"
        replayed = replay / "finetune" / f"seed_{seed}" / "metrics.json"
        assert replayed.read_bytes() == original.read_bytes()
    assert ArtifactStore.load_manifest(replay / "manifest_finetune.json").data["arguments"]["strategies"] is True


def test_replay_refuses_other_commands(trained, settings):
    assert main(["finetune", *settings(trained)]) == 0
    assert main(["pretrain", "--from-manifest", str(trained / "manifest_finetune.json")]) == 2
