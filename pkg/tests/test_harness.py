from pathlib import Path

import numpy as np
import pytest

from prgcn import checkpoint
from prgcn.cli import main
from prgcn.config import ConfigError, RunConfig, load_config, parse_config_text, parse_overrides
from prgcn.data import load_scene, make_scenes, read_manifest, synthesize
from prgcn.pipeline import PRGCN, lr_for_epoch, phase_for_epoch, train
from prgcn.pointcloud import read_ply

TINY = Path(__file__).parents[1] / "configs" / "tiny.cfg"


def tiny(**changes) -> RunConfig:
    return load_config(TINY).replace(**changes)


# config


def test_defaults():
    c = RunConfig()
    assert (c.lambda_adv, c.beta, c.mu, c.k_nn, c.n_raw, c.m_refined) == (0.05, 0.95, 1.0, 30, 100, 512)
    assert (c.lr, c.lr_decay, c.alt_epochs, c.joint_epochs, c.batch_size) == (1e-4, 0.3, 15, 30, 48)


def test_config_text_and_aliases():
    c = parse_config_text("# comment\nlambda = 0.1  # trailing\nM = 1024\nencoder_widths = 1,2,3,4,5,6\n")
    assert c.lambda_adv == 0.1 and c.m_refined == 1024
    assert c.encoder_widths == (1, 2, 3, 4, 5, 6)
    assert parse_config_text(c.to_text()) == c


@pytest.mark.parametrize("text", ["bogus = 1", "lr 1", "lr = fast", "decay = 0", "M = 100"])
def test_config_errors(text):
    with pytest.raises(ConfigError):
        parse_config_text(text)


def test_overrides_win():
    assert parse_overrides([("seed", "7")], tiny()).seed == 7


# checkpoint


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    params = {"a.weight": rng.normal(size=(3, 4)), "a.bias": rng.normal(size=4), "s": np.array(2.5)}
    checkpoint.save(tmp_path / "x.ckpt", params)
    back = checkpoint.load(tmp_path / "x.ckpt")
    for k, v in params.items():
        np.testing.assert_array_equal(back[k], v.astype(np.float32))
    checkpoint.save(tmp_path / "y.ckpt", back)
    assert (tmp_path / "x.ckpt").read_bytes() == (tmp_path / "y.ckpt").read_bytes()


def test_checkpoint_rejects_garbage():
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(b"NOPE")
    blob = checkpoint.encode({"w": np.ones(3)})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.decode(blob[:-2])


def test_missing_parameter_is_named():
    model = PRGCN(tiny())
    values = model.parameters()
    first = next(iter(values))
    del values[first]
    with pytest.raises(KeyError, match=first):
        model.load_parameters(values)


# data


def test_synthesize_manifest(tmp_path):
    manifest = synthesize(tmp_path / "d", 10, ["sphere", "cube"], 64, 0.4, 0.01, seed=3)
    records = read_manifest(manifest)
    assert len(records) == 10
    assert len(list((tmp_path / "d").iterdir())) >= 30
    scene = load_scene(records[1])
    assert scene.object_id == "cube" and len(scene.gt) == 64


def test_synthesize_is_byte_identical(tmp_path):
    synthesize(tmp_path / "a", 3, ["torus"], 32, 0.4, 0.01, seed=5)
    synthesize(tmp_path / "b", 3, ["torus"], 32, 0.4, 0.01, seed=5)
    for f in sorted((tmp_path / "a").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes()


def test_manifest_missing_file(tmp_path):
    manifest = synthesize(tmp_path, 2, ["cube"], 32, 0.0, 0.0, seed=1)
    (tmp_path / "scene_0001_gt.ply").unlink()
    with pytest.raises(ValueError, match="does not exist"):
        read_manifest(manifest)


# schedule and training


def test_schedule():
    cfg = RunConfig()
    phases = [phase_for_epoch(e, cfg) for e in range(45)]
    assert phases[:4] == ["prn", "pose", "prn", "pose"]
    assert phases[14] == "prn" and set(phases[15:]) == {"joint"}
    assert lr_for_epoch(22, cfg) == 1e-4
    assert lr_for_epoch(23, cfg) == pytest.approx(3e-5)


def test_zero_lr_gives_constant_losses():
    scenes = make_scenes(4, ["cube"], 64, 0.4, 0.01, seed=1)
    logs = train(PRGCN(tiny(lr=0.0)), scenes)
    assert max(l.loss for l in logs) - min(l.loss for l in logs) <= 1e-12


def test_toy_training_reduces_joint_loss():
    scenes = make_scenes(8, ["cube"], 64, 0.4, 0.01, seed=2)
    logs = train(PRGCN(tiny(alt_epochs=2, joint_epochs=8, lr=3e-3, lambda_adv=0.0)), scenes)
    joint = [l.loss for l in logs if l.phase == "joint"]
    assert joint[-1] < joint[0]


def test_seeded_training_is_deterministic():
    scenes = make_scenes(6, ["sphere", "cube"], 64, 0.4, 0.01, seed=4)
    runs = []
    for _ in range(2):
        model = PRGCN(tiny())
        logs = train(model, scenes)
        runs.append(([l.line() for l in logs], checkpoint.encode(model.parameters())))
    assert runs[0] == runs[1]


# command line


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = str(TINY)
    assert main(["synth", "--out", str(root / "data"), "--count", "6", "--n-points", "96",
                 "--seed", "1"]) == 0
    manifest = str(root / "data" / "manifest.csv")
    assert main(["train", manifest, "--config", cfg, "--out", str(root / "m.ckpt"),
                 "--set", "lr=3e-3", "--set", "lambda=0"]) == 0
    return root, manifest, cfg


def test_cli_train_outputs(toy_run):
    root, _, _ = toy_run
    assert (root / "m.ckpt").read_bytes()[:4] == b"PRGC"
    assert len((root / "m.ckpt.log").read_text().splitlines()) == 4


def test_cli_refine(toy_run):
    root, _, cfg = toy_run
    src = root / "data" / "scene_0000_raw.ply"
    assert main(["refine", str(root / "m.ckpt"), str(src), "--config", cfg,
                 "--out", str(root / "r.ply")]) == 0
    out = read_ply(root / "r.ply")
    assert len(out) == 64
    model = PRGCN(tiny())
    model.load_parameters(checkpoint.load(root / "m.ckpt"), only_prn=True)
    expected = model.refine_cloud(read_ply(src)).points
    np.testing.assert_array_equal(out.points.astype(np.float32), expected.astype(np.float32))


def test_cli_eval_and_bypass(toy_run):
    root, manifest, cfg = toy_run
    assert main(["eval", manifest, "--checkpoint", str(root / "m.ckpt"), "--config", cfg,
                 "--out", str(root / "ev")]) == 0
    assert (root / "ev" / "report.csv").exists()
    assert main(["eval", manifest, "--gt-poses", "--out", str(root / "gt")]) == 0
    mean = (root / "gt" / "report.csv").read_text().splitlines()[-1].split(",")
    assert float(mean[2]) == 0.0 and float(mean[3]) == 0.0 and float(mean[4]) == 100.0


def test_cli_eval_reports_bad_sample(toy_run, tmp_path):
    root, manifest, cfg = toy_run
    bad = root / "data" / "bad_manifest.csv"
    bad.write_text(Path(manifest).read_text())
    (root / "data" / "scene_0009_pose.txt").write_text("not a pose\n")
    lines = bad.read_text().splitlines()
    lines.append(lines[1].replace("scene_0000_pose", "scene_0009_pose"))
    bad.write_text("\n".join(lines) + "\n")
    assert main(["eval", str(bad), "--gt-poses", "--out", str(tmp_path / "ev")]) == 1
    assert "failed samples" in (tmp_path / "ev" / "report.txt").read_text()


def test_cli_errors(tmp_path, toy_run):
    root, _, cfg = toy_run
    assert main(["synth", "--out", str(tmp_path), "--count", "1", "--n-points", "4",
                 "--occlusion", "0.9"]) == 2
    # default architecture does not match the tiny checkpoint
    assert main(["refine", str(root / "m.ckpt"), str(root / "data" / "scene_0000_raw.ply"),
                 "--out", str(tmp_path / "r.ply")]) == 2
    assert main(["train", str(tmp_path / "nothing.csv"), "--out", str(tmp_path / "x")]) == 2
    assert main(["eval", "--bogus"]) == 2
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("decay = 2\n")
    assert main(["gradcheck", "--config", str(bad_cfg)]) == 2


def test_cli_bench(capsys):
    assert main(["bench", "--config", str(TINY), "--sizes", "64,128", "--runs", "10"]) == 0
    out = capsys.readouterr().out
    assert "PR " in out and "PE " in out and "median of 10 runs" in out


def test_cli_gradcheck_corrupted(capsys):
    assert main(["gradcheck", "--seeds", "1", "--corrupt", "relu"]) == 1
    rows = {line.split()[0]: line.split()[-1] for line in capsys.readouterr().out.splitlines()[1:]}
    assert rows["relu"] == "FAIL"
    assert rows["matmul"] == "PASS"
