import numpy as np

from driftalign import cli, metrics


def write_config(tmp_path, name="exp.toml", **overrides):
    base = {
        "seed": 1,
        "out_dir": str(tmp_path / "run"),
        "dataset": {"n_train": 200, "n_test": 300, "train_seed": 10, "test_seed": 20},
        "train": {"epochs": 2, "lr": 0.01},
        "arch": {"conv_channels": [6, 8]},
        "stream": {"batch_size": 50, "ordering": "iid"},
    }
    base.update(overrides)
    lines = [f"seed = {base['seed']}", f'out_dir = "{base["out_dir"]}"']
    lines += ["[dataset]"] + [f"{k} = {v}" for k, v in base["dataset"].items()]
    lines += ["[train]"] + [f"{k} = {v}" for k, v in base["train"].items()]
    lines += ["[arch]", f"conv_channels = {base['arch']['conv_channels']}"]
    lines += ["[method]", f'variant = "{base.get("variant", "da_em")}"']
    lines += ["[stream]", f"batch_size = {base['stream']['batch_size']}", f'ordering = "{base["stream"]["ordering"]}"']
    lines += ["[[stream.domains]]", 'kind = "gaussian_noise"', "severity = 3", "budget = 150"]
    path = tmp_path / name
    path.write_text("\n".join(lines) + "\n")
    return path


def test_full_workflow_through_the_cli(tmp_path, capsys):
    config = str(write_config(tmp_path))
    assert cli.main(["gen-dataset", "--config", config]) == 0
    assert cli.main(["train-source", "--config", config]) == 0
    assert cli.main(["extract-stats", "--config", config]) == 0
    assert cli.main(["run-tta", "--config", config]) == 0
    out = capsys.readouterr().out
    assert "error" in out and "batches" in out
    summary = metrics.read_summary(tmp_path / "run")
    assert summary["n_samples"] == 150
    assert summary["variant"] == "da_em"

    # a second variant, then compare the two runs
    second = write_config(tmp_path, name="src.toml", variant="source")
    second_text = second.read_text().replace(str(tmp_path / "run"), str(tmp_path / "run_src"))
    second.write_text(second_text)
    for sub in ("gen-dataset", "train-source", "extract-stats", "run-tta"):
        assert cli.main([sub, "--config", str(second)]) == 0
    code = cli.main(
        ["compare", str(tmp_path / "run"), str(tmp_path / "run_src"), "--out", str(tmp_path / "cmp")]
    )
    assert code == 0
    assert (tmp_path / "cmp" / "compare.csv").exists()
    table = capsys.readouterr().out
    assert "da_em" in table and "source" in table


def test_seed_override_changes_stream(tmp_path):
    config = str(write_config(tmp_path))
    assert cli.main(["gen-dataset", "--config", config]) == 0
    assert cli.main(["train-source", "--config", config]) == 0
    assert cli.main(["extract-stats", "--config", config]) == 0
    out_a = str(tmp_path / "a")
    out_b = str(tmp_path / "b")
    # out override must not lose the shared artifact paths
    base = (tmp_path / "exp.toml").read_text()
    for out in (out_a, out_b):
        patched = tmp_path / f"{out.split('/')[-1]}.toml"
        patched.write_text(
            base.replace(f'out_dir = "{tmp_path / "run"}"', f'out_dir = "{out}"')
            + f'\n[paths]\ntrain_dataset = "{tmp_path / "run" / "data" / "train"}"\n'
            f'test_dataset = "{tmp_path / "run" / "data" / "test"}"\n'
            f'weights = "{tmp_path / "run" / "model.dat"}"\nstats = "{tmp_path / "run" / "stats.dat"}"\n'
        )
        assert cli.main(["run-tta", "--config", str(patched), "--seed", "9" if out == out_a else "10"]) == 0
    assert (tmp_path / "a" / "batches.csv").read_bytes() != (tmp_path / "b" / "batches.csv").read_bytes()


def test_config_problems_exit_2(tmp_path, capsys):
    assert cli.main(["run-tta", "--config", str(tmp_path / "none.toml")]) == 2
    bad = tmp_path / "bad.toml"
    bad.write_text('[method]\nvariant = "telepathy"\n[[stream.domains]]\nkind = "contrast"\nbudget = 64\n')
    assert cli.main(["run-tta", "--config", str(bad)]) == 2
    err = capsys.readouterr().err
    assert "telepathy" in err

    # artifacts missing: also a configuration problem
    ok = write_config(tmp_path)
    assert cli.main(["run-tta", "--config", str(ok)]) == 2
    assert "test_dataset" in capsys.readouterr().err


def test_numeric_abort_exits_3(tmp_path, monkeypatch):
    config = str(write_config(tmp_path))
    assert cli.main(["gen-dataset", "--config", config]) == 0
    assert cli.main(["train-source", "--config", config]) == 0
    assert cli.main(["extract-stats", "--config", config]) == 0

    from driftalign import engine

    def explode(*args, **kwargs):
        raise engine.NumericAbort("synthetic")

    monkeypatch.setattr(engine, "adapt_step", explode)
    assert cli.main(["run-tta", "--config", config]) == 3


def test_compare_rejects_corrupt_csv_with_location(tmp_path, capsys):
    config = str(write_config(tmp_path))
    for sub in ("gen-dataset", "train-source", "extract-stats", "run-tta"):
        assert cli.main([sub, "--config", config]) == 0
    other = tmp_path / "other"
    other.mkdir()
    for name in ("summary.csv", "domains.csv", "batches.csv"):
        (other / name).write_bytes((tmp_path / "run" / name).read_bytes())
    (other / "summary.csv").write_text("garbage\n")
    assert cli.main(["compare", str(tmp_path / "run"), str(other)]) == 2
    assert "summary.csv:1" in capsys.readouterr().err
