import json

import numpy as np
import pytest

from sefcn.architectures import NetworkSpec, assemble_network
from sefcn.config import ConfigError, RunConfig, load_config, loads
from sefcn.losses import one_hot, read_metrics_csv
from sefcn.pgm import read_pgm, to_gray8, write_pgm
from sefcn.trainer import evaluate, save_checkpoint


def write_config(path, **sections):
    path.write_text(json.dumps(sections))
    return path


@pytest.fixture
def small(tmp_path):
    return write_config(
        tmp_path / "run.json",
        network={"family": "sdnet", "channels": 4, "num_classes": 3, "se": {"mode": "scse"}},
        train={"max_epochs": 2, "seed": 1},
        data={"out_dir": str(tmp_path / "data"), "n_samples": 12, "height": 16, "width": 16,
              "num_classes": 3},
        output={"run_dir": str(tmp_path / "run")},
        inspect={"blocks": ["sE-1", "sD-4"]})


# -- config ------------------------------------------------------------------


def test_print_config_roundtrip(small, run_cli):
    code, out, _ = run_cli("train", "--config", small, "--print-config")
    assert code == 0
    cfg = loads(out)
    assert cfg == load_config(small)
    assert loads(cfg.dumps()) == cfg


def test_defaults_are_printable(run_cli):
    code, out, _ = run_cli("count-params", "--print-config")
    assert code == 0 and loads(out) == RunConfig()
    assert set(json.loads(out)) == {"network", "train", "data", "output", "inspect"}


@pytest.mark.parametrize("doc", [
    {"network": {"width": 3}}, {"extra": {}}, {"train": {"lr": 0.1}},
    {"network": {"se": {"mode": "cse", "ratio": 2}}}, {"data": {"profile": "skewed"}},
    {"train": "fast"},
])
def test_unknown_or_invalid_keys_rejected(doc):
    with pytest.raises(ConfigError):
        RunConfig.from_dict(doc)


def test_seed_precedence(small):
    assert load_config(small, environ={}).train.seed == 1
    assert load_config(small, environ={"SEFCN_SEED": "5"}).train.seed == 5
    cfg = load_config(small, seed=9, environ={"SEFCN_SEED": "5"})
    assert cfg.train.seed == 9 and cfg.data.seed == 9
    with pytest.raises(ConfigError):
        load_config(small, environ={"SEFCN_SEED": "five"})


def test_env_seed_reaches_cli(small, run_cli, monkeypatch):
    monkeypatch.setenv("SEFCN_SEED", "42")
    assert json.loads(run_cli("gen-data", "--config", small, "--print-config")[1])["data"]["seed"] == 42
    assert json.loads(run_cli("gen-data", "--config", small, "--seed", "3",
                              "--print-config")[1])["data"]["seed"] == 3


def test_bad_config_file_exit_codes(tmp_path, run_cli):
    (tmp_path / "bad.json").write_text("{not json")
    assert run_cli("train", "--config", tmp_path / "bad.json")[0] == 2
    assert run_cli("train", "--config", tmp_path / "missing.json")[0] == 3


# -- gen-data ----------------------------------------------------------------


def test_gen_data(small, tmp_path, run_cli):
    code, out, _ = run_cli("gen-data", "--config", small)
    assert code == 0 and (tmp_path / "data/manifest.json").exists()


def test_gen_data_bad_extent(tmp_path, run_cli):
    cfg = write_config(tmp_path / "c.json", data={"height": 60, "out_dir": str(tmp_path / "d")})
    code, _, err = run_cli("gen-data", "--config", cfg)
    assert code == 2 and "divisible by 16" in err


def test_gen_data_unwritable(tmp_path, run_cli):
    (tmp_path / "file").write_text("")
    cfg = write_config(tmp_path / "c.json", data={"out_dir": str(tmp_path / "file/sub"),
                                                  "n_samples": 2, "height": 16, "width": 16})
    assert run_cli("gen-data", "--config", cfg)[0] == 3


# -- train / eval / inspect ----------------------------------------------------


@pytest.fixture
def trained(small, tmp_path, run_cli):
    assert run_cli("gen-data", "--config", small)[0] == 0
    code, out, err = run_cli("train", "--config", small)
    assert code == 0, err
    return small


def test_train_run_directory(trained, tmp_path):
    run = tmp_path / "run"
    assert loads((run / "config.json").read_text()) == load_config(trained)
    rows = read_metrics_csv(run / "metrics.csv")
    assert len(rows) == 4
    assert (run / "checkpoints/epoch_002.ckpt").exists()


def test_train_without_data_is_io_error(small, run_cli):
    assert run_cli("train", "--config", small)[0] == 3


def test_train_class_count_mismatch(small, tmp_path, run_cli):
    run_cli("gen-data", "--config", small)
    doc = json.loads(small.read_text())
    doc["network"]["num_classes"] = 5
    assert run_cli("train", "--config", write_config(tmp_path / "k.json", **doc))[0] == 2


def test_train_divergence_exit_code(small, tmp_path, run_cli):
    from sefcn.tensor import read_tensor, write_tensor
    run_cli("gen-data", "--config", small)
    img = tmp_path / "data/image_00002.tns"
    t = read_tensor(img)
    t[0, 3, 3] = np.nan
    write_tensor(t, img)
    code, _, err = run_cli("train", "--config", small)
    assert code == 4 and "diverged" in err
    assert (tmp_path / "run/checkpoints/epoch_000.ckpt").exists()
    assert run_cli("eval", "--config", small)[0] == 0


def test_eval_writes_metrics(trained, tmp_path, run_cli):
    code, out, _ = run_cli("eval", "--config", trained)
    assert code == 0 and "global_dice" in out
    rows = read_metrics_csv(tmp_path / "run/eval_test.csv")
    assert rows[0]["split"] == "test" and rows[0]["epoch"] == "2"
    assert 0 <= float(rows[0]["global_dice"]) <= 1


def test_eval_self_consistency(trained, tmp_path, run_cli):
    run_cli("eval", "--config", trained, "--split", "val")
    logged = read_metrics_csv(tmp_path / "run/metrics.csv")[-1]
    evaluated = read_metrics_csv(tmp_path / "run/eval_val.csv")[0]
    assert logged["split"] == "val"
    assert float(evaluated["global_dice"]) >= float(logged["global_dice"]) - 0.02


def test_eval_mismatched_checkpoint(trained, tmp_path, run_cli):
    doc = json.loads(trained.read_text())
    doc["network"]["depth"] = 3
    code, _, err = run_cli("eval", "--config", write_config(tmp_path / "d3.json", **doc))
    assert code == 2 and "tensor #" in err


def test_eval_perfect_oracle():
    labels = np.random.default_rng(0).integers(0, 3, (2, 8, 8))

    class Oracle:
        spec = NetworkSpec(num_classes=3)

        def forward(self, x, mode):
            return one_hot(labels[:len(x)], 3, np.float64)

    loss, dice = evaluate(Oracle(), np.zeros((2, 1, 8, 8)), labels, weights=np.ones(3))
    assert np.all(dice == 1.0) and loss == 0.0


def test_inspect_excitation_per_epoch(trained, tmp_path, run_cli):
    code, _, err = run_cli("inspect-excitation", "--config", trained,
                           "--checkpoint", tmp_path / "run")
    assert code == 0, err
    files = sorted(p.name for p in (tmp_path / "run/excitation").iterdir())
    assert files == [f"{b}_epoch{e:03d}.pgm" for b in ("sD-4", "sE-1") for e in range(3)]
    assert read_pgm(tmp_path / "run/excitation/sE-1_epoch001.pgm").shape == (16, 16)


def test_inspect_zero_weight_fixture(small, tmp_path, run_cli):
    run_cli("gen-data", "--config", small)
    cfg = load_config(small)
    net = assemble_network(cfg.network, seed=0)
    for blk in net.se_blocks():
        for p in blk.se.parameters():
            p.value[...] = 0
    ckpt = tmp_path / "zero.ckpt"
    save_checkpoint(net, ckpt)
    sample = tmp_path / "data/image_00000.tns"
    code, _, err = run_cli("inspect-excitation", "--config", small, "--checkpoint", ckpt,
                           "--sample", sample)
    assert code == 0, err
    img = read_pgm(tmp_path / "run/excitation/sE-1_zero.pgm")
    assert img.shape == (16, 16) and np.all(img == 128)
    assert np.all(read_pgm(tmp_path / "run/excitation/sD-4_zero.pgm") == 128)


def test_inspect_cse_only_is_config_error(small, tmp_path, run_cli):
    doc = json.loads(small.read_text())
    doc["network"]["se"]["mode"] = "cse"
    code, _, err = run_cli("inspect-excitation", "--config", write_config(tmp_path / "c.json", **doc))
    assert code == 2 and "cSE" in err


def test_train_with_excitation_dumps(small, tmp_path, run_cli):
    doc = json.loads(small.read_text())
    doc["inspect"]["enabled"] = True
    cfg = write_config(tmp_path / "i.json", **doc)
    run_cli("gen-data", "--config", cfg)
    assert run_cli("train", "--config", cfg)[0] == 0
    assert len(list((tmp_path / "run/excitation").glob("sE-1_epoch*.pgm"))) == 2


# -- count-params --------------------------------------------------------------


def parse_counts(out):
    rows = {}
    for line in out.splitlines():
        parts = line.split()
        if parts and parts[0] in ("none", "cse", "sse", "scse") and len(parts) == 4:
            rows[parts[0]] = (int(parts[1]), int(parts[2]), float(parts[3].rstrip("%")))
    return rows


def test_count_params_table(tmp_path, run_cli):
    code, out, _ = run_cli("count-params")
    rows = parse_counts(out)
    assert code == 0
    assert [rows[m][1] for m in ("none", "cse", "sse", "scse")] == [0, 32768, 512, 33280]


def test_count_params_r16(tmp_path, run_cli):
    cfg = write_config(tmp_path / "c.json", network={"se": {"mode": "cse", "r": 16}})
    assert parse_counts(run_cli("count-params", "--config", cfg)[1])["cse"][1] == 8 * 512


def test_count_params_concatenation_doubles(tmp_path, run_cli):
    cfg = write_config(tmp_path / "c.json", network={"se": {"aggregation": "concatenation"}})
    code, out, _ = run_cli("count-params", "--config", cfg)
    assert code == 0
    blocks = {l.split()[0]: l.split() for l in out.splitlines() if l.startswith(("encoder", "decoder"))}
    assert blocks["encoder1"][2] == "128" and blocks["encoder2"][1] == "128"


def test_count_params_bad_ratio(tmp_path, run_cli):
    cfg = write_config(tmp_path / "c.json", network={"channels": 6, "se": {"r": 4}})
    assert run_cli("count-params", "--config", cfg)[0] == 2


# -- pgm -----------------------------------------------------------------------


def test_gray_rounding_half_to_even():
    assert to_gray8([0.5])[0] == 128  # 127.5 -> 128
    assert to_gray8([0.0, 1.0, 2.0, -1.0]).tolist() == [0, 255, 255, 0]
    assert to_gray8([1.5 / 255, 2.5 / 255]).tolist() == [2, 2]


def test_pgm_roundtrip(tmp_path, rng):
    v = rng.random((5, 7))
    write_pgm(tmp_path / "a.pgm", v)
    data = (tmp_path / "a.pgm").read_bytes()
    assert data.startswith(b"P5\n7 5\n255\n") and len(data) == 11 + 35
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), to_gray8(v))
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "b.pgm", np.zeros(3))
