import json

import pytest

from blursplat.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_PROVIDER, main

SMALL = {"recipe": {"seed": 2, "count": 60, "layout": "cluster-field"}, "n_frames": 10,
         "views": {"3": [1, 4, 8]}, "width": 24, "height": 24}


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "bench.json"
    cfg.write_text(json.dumps(SMALL))
    assert main(["blur-dataset", "--config", str(cfg), "--out", str(root / "data"), "--seed", "3"]) == EXIT_OK
    return root / "data"


def test_seed_and_hash_are_printed(tmp_path, capsys):
    assert main(["gen-scene", "--seed", "11", "--count", "20", "--out", str(tmp_path / "s.json")]) == EXIT_OK
    out = capsys.readouterr().out
    assert "seed: 11" in out and "config hash: " in out
    h = out.split("config hash: ")[1].split()[0]
    assert json.loads((tmp_path / "s.json").read_text())["meta"]["config_hash"] == h


def test_config_hash_changes_with_arguments(tmp_path, capsys):
    hashes = []
    for seed in (1, 2):
        main(["gen-scene", "--seed", str(seed), "--count", "20", "--out", str(tmp_path / f"{seed}.json")])
        hashes.append(capsys.readouterr().out.split("config hash: ")[1].split()[0])
    assert hashes[0] != hashes[1]


def test_render_and_fft(tmp_path):
    main(["gen-scene", "--count", "30", "--out", str(tmp_path / "s.json")])
    pose = json.dumps({"q": [1, 0, 0, 0], "t": [0, 0, -2.5]})
    assert main(["render", "--scene", str(tmp_path / "s.json"), "--pose", pose, "--width", "24", "--height", "24",
                 "--out", str(tmp_path / "r" / "view")]) == EXIT_OK
    for name in ("view.png", "view.pfm", "view_depth.pfm", "view_meta.json"):
        assert (tmp_path / "r" / name).exists()
    assert "config_hash" in json.loads((tmp_path / "r" / "view_meta.json").read_text())
    assert main(["fft", "--image", str(tmp_path / "r" / "view.png")]) == EXIT_OK
    spec = json.loads((tmp_path / "r" / "view.spectrum.json").read_text())
    assert 0 <= spec["hf_ratio"] <= 1 and spec["config_hash"]


def test_dataset_artifacts_carry_hash(dataset):
    for f in ("cameras.json", "split.json", "benchmark.json"):
        assert json.loads((dataset / f).read_text())["config_hash"]


def test_train_eval_explore(dataset, tmp_path):
    run = tmp_path / "run"
    sets = ["--set", "total_iters=6", "--set", "warmup_iters=2", "--set", "gen_interval=2", "--set", "init_count=40",
            "--set", "candidates_per_pair=1"]
    assert main(["train", "--dataset", str(dataset), "--out", str(run), *sets]) == EXIT_OK
    assert main(["eval", "--dataset", str(dataset), "--run", str(run)]) == EXIT_OK
    assert json.loads((run / "eval.json").read_text())["views"]
    assert main(["explore", "--dataset", str(dataset), "--run", str(run), *sets]) == EXIT_OK
    assert "candidates" in json.loads((run / "explore.json").read_text())


@pytest.mark.parametrize(
    "argv",
    [
        ["train", "--out", "x"],  # missing --dataset
        ["no-such-command"],
        ["gen-scene", "--count", "-3", "--out", "x.json"],
        ["render", "--scene", "s.json", "--pose", "not json", "--out", "x"],
    ],
)
def test_config_errors_exit_2(argv, tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    if argv[0] == "render":
        main(["gen-scene", "--count", "10", "--out", "s.json"])
    assert main(argv) == EXIT_CONFIG


def test_bad_train_key_exits_2(dataset, tmp_path):
    assert main(["train", "--dataset", str(dataset), "--out", str(tmp_path), "--set", "total_iter=5"]) == EXIT_CONFIG


def test_data_errors_exit_3(tmp_path):
    assert main(["train", "--dataset", str(tmp_path / "nothing"), "--out", str(tmp_path / "o")]) == EXIT_DATA
    (tmp_path / "bad.png").write_bytes(b"not a png")
    assert main(["fft", "--image", str(tmp_path / "bad.png")]) == EXIT_DATA
    assert main(["render", "--scene", str(tmp_path / "missing.json"), "--pose", '{"q":[1,0,0,0],"t":[0,0,0]}',
                 "--out", str(tmp_path / "x")]) == EXIT_DATA


def test_eval_without_checkpoint_exits_3(dataset, tmp_path):
    assert main(["eval", "--dataset", str(dataset), "--run", str(tmp_path)]) == EXIT_DATA


def test_unreachable_provider_exits_4(dataset, tmp_path):
    argv = ["train", "--dataset", str(dataset), "--out", str(tmp_path), "--provider", "remote:http://127.0.0.1:9",
            "--set", "total_iters=4", "--set", "warmup_iters=2"]
    assert main(argv) == EXIT_PROVIDER
