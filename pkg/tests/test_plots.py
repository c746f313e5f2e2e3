from driftalign import metrics, plots, runner
from driftalign.metrics import BatchRow, MetricsTrace


def synthetic_run(tmp_path, n_batches=12, shift_at=None):
    trace = MetricsTrace(
        variant="da_em",
        ordering="dirichlet",
        domains=[("gaussian_noise", 5), ("contrast", 3)],
    )
    half = n_batches // 2
    for i in range(n_batches):
        trace.add(
            BatchRow(
                batch_index=i,
                domain_id=0 if i < half else 1,
                n_samples=32,
                n_correct=20 + i % 5,
                l_da=0.5 + 0.3 * (i >= half),
                l_em=0.05 * i,
                l_final=0.5 + 0.3 * (i >= half) + 0.05 * i,
                n_confident=i,
                shift_detected=int(i == shift_at),
            )
        )
    metrics.write_trace(trace, tmp_path)
    return trace


def test_render_run_writes_all_figures(tmp_path):
    synthetic_run(tmp_path, shift_at=7)
    paths = plots.render_run(tmp_path)
    names = [p.split("/")[-1] for p in paths]
    assert names == ["losses.png", "accuracy.png", "domain_errors.png"]
    for p in paths:
        with open(p, "rb") as fh:
            assert fh.read(8)[1:4] == b"PNG"


def test_render_to_separate_directory(tmp_path):
    synthetic_run(tmp_path / "run")
    out = tmp_path / "figs"
    paths = plots.render_run(tmp_path / "run", out_dir=out)
    assert all(str(out) in p for p in paths)


def test_render_comparison(tmp_path):
    synthetic_run(tmp_path / "a")
    synthetic_run(tmp_path / "b")
    header, table = runner.compare_runs([str(tmp_path / "a"), str(tmp_path / "b")])
    path = plots.render_comparison(header, table, str(tmp_path / "cmp.png"))
    with open(path, "rb") as fh:
        assert fh.read(8)[1:4] == b"PNG"
