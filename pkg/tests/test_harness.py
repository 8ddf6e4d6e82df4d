import math
import re
import struct
from dataclasses import replace

import numpy as np
import pytest

from gradleak.errors import ConfigError, InsufficientDataError, ParseError
from gradleak.gradmatch import GradLossKind
from gradleak.harness.cli import EXIT_CONFIG, EXIT_DATA, main
from gradleak.harness.config import (
    ExperimentConfig,
    dump_config,
    load_config,
    parse_config,
    with_overrides,
)
from gradleak.harness.data import (
    SyntheticParams,
    area_resize,
    gen_synthetic,
    load_idx,
    write_idx_images,
    write_idx_labels,
)
from gradleak.harness.pipeline import (
    ReportRow,
    compute_correlations,
    run_experiment,
    sample_proxies,
)
from gradleak.harness.report import (
    SAMPLES_HEADER,
    decade_ticks,
    emit_report,
    read_correlations_csv,
    read_samples_csv,
    svg_scatter,
)
from gradleak.lavp import PROXY_NAMES, ProxyRecord
from gradleak.metrics import SimilarityScores, spearman
from gradleak.tensorcore import SeededRng

TINY = """
data.sample_count = 4
model.train_count = 30
model.epochs = 1
attack.l2.steps = 15
attack.cos.steps = 15
attack.l2.restarts = 1
attack.cos.restarts = 1
proxy.max_iters = 80
"""


@pytest.fixture(scope="module")
def tiny_cfg():
    return parse_config(TINY)


@pytest.fixture(scope="module")
def tiny_run(tiny_cfg):
    return run_experiment(tiny_cfg)


# -- IDX ---------------------------------------------------------------------

@pytest.fixture
def idx_pair(tmp_path):
    imgs = np.array([np.arange(64).reshape(8, 8), 255 - np.arange(64).reshape(8, 8)], np.uint8)
    write_idx_images(tmp_path / "img.idx", imgs)
    write_idx_labels(tmp_path / "lab.idx", [1, 3])
    return tmp_path / "img.idx", tmp_path / "lab.idx"


class TestIdx:
    def test_well_formed(self, idx_pair):
        samples = load_idx(*idx_pair)
        assert len(samples) == 2
        assert [s.y for s in samples] == [1, 3]
        assert samples[0].x[1] == pytest.approx(1 / 255)
        assert all(0 <= s.x.min() and s.x.max() <= 1 for s in samples)

    def test_header_bytes_big_endian(self, idx_pair):
        raw = idx_pair[0].read_bytes()
        assert raw[:4] == b"\x00\x00\x08\x03"
        assert struct.unpack(">3I", raw[4:16]) == (2, 8, 8)

    def test_bad_magic(self, tmp_path, idx_pair):
        bad = tmp_path / "bad.idx"
        bad.write_bytes(b"\x00\x00\x00\x00" + idx_pair[0].read_bytes()[4:])
        with pytest.raises(ParseError, match="offset 0"):
            load_idx(bad, idx_pair[1])

    def test_truncated(self, tmp_path, idx_pair):
        cut = tmp_path / "cut.idx"
        cut.write_bytes(idx_pair[0].read_bytes()[:-5])
        with pytest.raises(ParseError, match="offset"):
            load_idx(cut, idx_pair[1])

    def test_count_mismatch(self, tmp_path, idx_pair):
        write_idx_labels(tmp_path / "one.idx", [1])
        with pytest.raises(ParseError):
            load_idx(idx_pair[0], tmp_path / "one.idx")

    def test_downsample_preserves_mean(self, tmp_path):
        img = SeededRng(0).integers(0, 256, size=(1, 28, 28)).astype(np.uint8)
        write_idx_images(tmp_path / "big.idx", img)
        write_idx_labels(tmp_path / "big_l.idx", [0])
        (s,) = load_idx(tmp_path / "big.idx", tmp_path / "big_l.idx", size=(8, 8))
        assert s.x.size == 64
        assert s.x.mean() == pytest.approx(img.mean() / 255.0, abs=1e-12)

    def test_area_resize_block_average(self):
        img = np.arange(16.0).reshape(4, 4)
        out = area_resize(img, (2, 2))
        np.testing.assert_allclose(out, [[2.5, 4.5], [10.5, 12.5]])


class TestSynthetic:
    def test_noise_free_same_class_identical(self):
        samples = gen_synthetic(SyntheticParams(count=30, noise=0.0), SeededRng(1))
        by_class = {}
        for s in samples:
            if s.y in by_class:
                np.testing.assert_array_equal(s.x, by_class[s.y])
            by_class[s.y] = s.x
        assert len(by_class) > 1

    def test_seeded(self):
        a = gen_synthetic(SyntheticParams(count=5), SeededRng(2))
        b = gen_synthetic(SyntheticParams(count=5), SeededRng(2))
        assert all(x.x.tobytes() == y.x.tobytes() and x.y == y.y for x, y in zip(a, b))

    def test_center_blob_peak(self):
        p = SyntheticParams(count=4, height=9, width=9, classes=1, noise=0.0, centers=((4.0, 4.0),))
        s = gen_synthetic(p, SeededRng(0))[0]
        assert np.argmax(s.x) == 4 * 9 + 4

    def test_too_many_classes(self):
        with pytest.raises(Exception):
            gen_synthetic(SyntheticParams(count=2, classes=5), SeededRng(0), n_classes=4)


# -- config ------------------------------------------------------------------

class TestConfig:
    def test_defaults_desk_scale(self):
        cfg = ExperimentConfig()
        assert cfg.data.sample_count == 20
        assert cfg.model.layer_sizes == (64, 32, 4)
        assert cfg.model.activation == "tanh"

    def test_dotted_keys(self):
        cfg = parse_config("attack.l2.steps = 42\nattack.kinds = cos\n# comment\n\nmaster_seed = 9")
        assert cfg.attack[GradLossKind.L2].steps == 42
        assert cfg.kinds == (GradLossKind.COSINE,)
        assert cfg.master_seed == 9

    def test_dump_roundtrip(self):
        cfg = parse_config("attack.cos.alpha_tv = 0\nproxy.tol = 1e-7\nmodel.layer_sizes = 64,16,4")
        assert parse_config(dump_config(cfg)) == cfg
        assert cfg.digest() == parse_config(dump_config(cfg)).digest()

    @pytest.mark.parametrize("text", ["bogus = 1", "model.depth = 3", "attack.l1.steps = 3",
                                      "attack.l2.seed = 1", "data.sample_count = x",
                                      "data.sample_count = 1", "no equals sign"])
    def test_errors(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    def test_image_size_must_match_model(self):
        with pytest.raises(ConfigError):
            parse_config("data.height = 4")

    def test_overrides(self):
        cfg = with_overrides(ExperimentConfig(), seed=3, out="elsewhere")
        assert (cfg.master_seed, cfg.output_dir) == (3, "elsewhere")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(tmp_path / "nope.cfg")


# -- pipeline ----------------------------------------------------------------

def _row(i, mse, failed=False):
    rec = ProxyRecord(i, *(float(i + 1),) * 6)
    row = ReportRow(i, 0, rec)
    if failed:
        row.failures[GradLossKind.L2] = "all restarts failed"
    else:
        row.scores[GradLossKind.L2] = SimilarityScores(mse, 10.0, 0.5)
        row.gm_final[GradLossKind.L2] = 0.1
    return row


class TestPipeline:
    def test_one_row_per_sample(self, tiny_run, tiny_cfg):
        assert [r.sample_id for r in tiny_run.rows] == list(range(tiny_cfg.data.sample_count))
        assert all(r.status == "ok" for r in tiny_run.rows)

    def test_insufficient_rows(self):
        with pytest.raises(InsufficientDataError, match="insufficient usable rows"):
            compute_correlations([_row(0, 0.1), _row(1, 0.0, failed=True)], ["l2"])

    def test_failed_rows_excluded(self):
        rows = [_row(0, 0.1), _row(1, 0.0, failed=True), _row(2, 0.3), _row(3, 0.2)]
        rep = compute_correlations(rows, ["l2"])
        assert rep.sample_counts == {"l2": 3}
        assert rep.get("grad_norm", "mse_l2") == pytest.approx(spearman([1, 3, 4], [0.1, 0.3, 0.2]))

    def test_constant_score_gives_nan(self):
        rows = [_row(i, 0.1) for i in range(3)]
        rep = compute_correlations(rows, ["l2"])
        assert math.isnan(rep.get("l2_max", "mse_l2"))
        assert math.isnan(rep.get("l2_max", "psnr_l2"))

    def test_layout(self, tiny_run):
        rep = tiny_run.report
        assert rep.proxies == PROXY_NAMES
        assert rep.columns == ("mse_l2", "ssim_l2", "psnr_l2", "mse_cos", "ssim_cos", "psnr_cos")
        finite = rep.matrix[np.isfinite(rep.matrix)]
        assert np.all(np.abs(finite) <= 1.0)

    def test_proxies_independent_of_attacks(self, tiny_run, tiny_cfg):
        no_attack = run_experiment(tiny_cfg, run_attacks=False)
        for a, b in zip(tiny_run.rows, no_attack.rows):
            assert a.proxies.values() == b.proxies.values()

    def test_proxies_independent_of_order(self, tiny_run, tiny_cfg):
        from gradleak.harness.pipeline import load_samples

        _, evals = load_samples(tiny_cfg)
        for i in reversed(range(len(evals))):
            rec = sample_proxies(tiny_cfg, tiny_run.weights, evals[i], i)
            assert rec.values() == tiny_run.rows[i].proxies.values()

    def test_workers_do_not_change_results(self, tiny_run, tiny_cfg):
        par = run_experiment(replace(tiny_cfg, workers=2))
        assert par.report == tiny_run.report


# -- report ------------------------------------------------------------------

class TestReport:
    def test_artifacts(self, tiny_run, tiny_cfg, tmp_path):
        emit_report(tiny_run.rows, tiny_run.report, tmp_path, dump_config(tiny_cfg))
        lines = (tmp_path / "samples.csv").read_bytes().split(b"\n")
        assert lines[0].decode() == ",".join(SAMPLES_HEADER)
        assert len(lines) == tiny_cfg.data.sample_count + 2  # header, rows, trailing newline
        assert b"\r" not in (tmp_path / "samples.csv").read_bytes()
        svgs = list(tmp_path.glob("scatter_*.svg"))
        assert len(svgs) == 6 * 6
        import json

        meta = json.loads((tmp_path / "report.json").read_text())
        assert meta["config_digest"] == tiny_cfg.digest()
        assert "numpy" in meta["environment"]

    def test_two_rows_three_lines(self, tmp_path):
        rows = [_row(0, 0.1), _row(1, 0.2)]
        emit_report(rows, compute_correlations(rows, ["l2"]), tmp_path)
        text = (tmp_path / "samples.csv").read_text()
        assert len(text.splitlines()) == 3
        # cosine did not run: its four columns stay empty
        assert text.splitlines()[1].endswith(",,,,ok")

    def test_samples_roundtrip_exact(self, tiny_run, tmp_path):
        emit_report(tiny_run.rows, tiny_run.report, tmp_path)
        back = read_samples_csv(tmp_path / "samples.csv")
        for a, b in zip(tiny_run.rows, back):
            assert a.proxies.values() == b.proxies.values()
            assert a.scores == b.scores
            assert a.gm_final == b.gm_final

    def test_correlations_roundtrip_exact(self, tiny_run, tmp_path):
        emit_report(tiny_run.rows, tiny_run.report, tmp_path)
        back = read_correlations_csv(tmp_path / "correlations.csv")
        assert back == tiny_run.report
        assert back.sample_counts == tiny_run.report.sample_counts

    def test_correlations_recomputable_from_csv(self, tiny_run, tmp_path):
        import csv

        emit_report(tiny_run.rows, tiny_run.report, tmp_path)
        with open(tmp_path / "samples.csv") as fh:
            recs = list(csv.DictReader(fh))
        for proxy in PROXY_NAMES:
            for col in tiny_run.report.columns:
                a = [float(r[proxy]) for r in recs]
                b = [float(r[col]) for r in recs]
                try:
                    expected = spearman(a, b)
                except InsufficientDataError:
                    expected = math.nan
                got = tiny_run.report.get(proxy, col)
                assert (math.isnan(got) and math.isnan(expected)) or got == expected

    def test_decade_ticks(self):
        assert decade_ticks(1e-6, 1e6) == [10.0**e for e in range(-6, 7)]
        assert decade_ticks(2e-3, 5e-3) == [1e-3, 1e-2]

    def test_svg_log_axis(self):
        svg = svg_scatter([1e-6, 1.0, 1e6], [0.1, 0.2, 0.3], "p vs s: Spearman +1.000", "p", "s")
        ticks = re.findall(r'class="xtick" x1="([0-9.]+)"', svg)
        assert len(ticks) == 13
        gaps = np.diff([float(t) for t in ticks])
        np.testing.assert_allclose(gaps, gaps[0], atol=0.02)
        assert "Spearman +1.000" in svg
        assert svg.startswith("<svg") and "href" not in svg

    def test_svg_drops_nonpositive(self):
        svg = svg_scatter([0.0, 1.0, 10.0], [1, 2, 3], "t", "x", "y")
        assert svg.count("<circle") == 2
        assert "1 non-positive point(s) omitted" in svg


# -- CLI ---------------------------------------------------------------------

class TestCli:
    @pytest.fixture
    def cfg_file(self, tmp_path):
        path = tmp_path / "tiny.cfg"
        path.write_text(TINY)
        return path

    def test_run_then_report(self, cfg_file, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(["--config", str(cfg_file), "--out", str(out), "run"]) == 0
        first = (out / "correlations.csv").read_bytes()
        again = tmp_path / "again"
        assert main(["--config", str(cfg_file), "--out", str(again), "report", "--input", str(out)]) == 0
        assert (again / "correlations.csv").read_bytes() == first
        assert "spearman vs mse_l2" in capsys.readouterr().out

    def test_attack_outputs(self, cfg_file, tmp_path):
        out = tmp_path / "atk"
        assert main(["--config", str(cfg_file), "--out", str(out), "attack", "--sample", "1",
                     "--kind", "l2"]) == 0
        pgm = (out / "sample1_l2.pgm").read_bytes()
        assert pgm.startswith(b"P5\n8 8\n255\n") and len(pgm) == 11 + 64
        assert (out / "sample1_l2.json").exists()

    def test_proxy_and_train(self, cfg_file, tmp_path):
        out = tmp_path / "px"
        assert main(["--config", str(cfg_file), "--out", str(out), "proxy"]) == 0
        lines = (out / "proxies.csv").read_text().splitlines()
        assert lines[0] == "sample_id,label," + ",".join(PROXY_NAMES)
        assert len(lines) == 5
        assert main(["--config", str(cfg_file), "--out", str(out), "train"]) == 0
        assert (out / "weights.json").exists() and (out / "weights.bin").exists()

    def test_seed_flag_changes_data(self, cfg_file, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        main(["--config", str(cfg_file), "--out", str(a), "--seed", "1", "proxy"])
        main(["--config", str(cfg_file), "--out", str(b), "--seed", "2", "proxy"])
        assert (a / "proxies.csv").read_bytes() != (b / "proxies.csv").read_bytes()

    def test_config_error_exit(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("bogus = 1\n")
        assert main(["--config", str(bad), "run"]) == EXIT_CONFIG

    def test_data_error_exit(self, tmp_path, idx_pair):
        cfg = tmp_path / "idx.cfg"
        bad = tmp_path / "zero_magic.idx"
        bad.write_bytes(b"\x00" * 16)
        cfg.write_text(f"data.source = idx\ndata.idx_images = {bad}\ndata.idx_labels = {idx_pair[1]}\n")
        assert main(["--config", str(cfg), "--out", str(tmp_path / "o"), "proxy"]) == EXIT_DATA
