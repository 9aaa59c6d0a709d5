import json
from collections import Counter
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from devdet import datagen as dg
from devdet.data import load_manifest


def small_config(seed=3, n=100, holdout=()):
    domains = (
        dg.DomainSpec(0, "stripes", (0.7, 0.35, 0.3), 0.03, 0.10, "ellipse"),
        dg.DomainSpec(1, "checker", (0.3, 0.6, 0.35), 0.03, 0.08, "ripple"),
        dg.DomainSpec(2, "blobs", (0.4, 0.3, 0.6), 0.03, 0.08, "channel_offset"),
    )
    return dg.BenchmarkConfig(domains, n, 32, seed, holdout)


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    out = tmp_path_factory.mktemp("bench")
    cfg = small_config(holdout=(2,))
    manifest = dg.generate_benchmark(cfg, out)
    return cfg, manifest, out


def test_counts_and_splits(bench):
    cfg, manifest, _ = bench
    per = Counter((r.domain_id, r.label) for r in manifest.records)
    assert set(per.values()) == {cfg.images_per_domain_per_class}
    splits = Counter((r.domain_id, r.split) for r in manifest.records if r.label == 0)
    assert splits[(0, "train")] == 60 and splits[(0, "val")] == 20 and splits[(0, "test")] == 20
    assert splits[(2, "test")] == 100  # holdout domain is test-only


def test_sample_ids_unique(bench):
    _, manifest, _ = bench
    ids = [r.sample_id for r in manifest.records]
    assert len(ids) == len(set(ids))


def test_regeneration_is_byte_identical(bench, tmp_path):
    cfg, manifest, out = bench
    dg.generate_benchmark(cfg, tmp_path)
    assert (tmp_path / "manifest.txt").read_bytes() == (out / "manifest.txt").read_bytes()
    for rec in manifest.records[::37]:
        assert (tmp_path / rec.relative_path).read_bytes() == (out / rec.relative_path).read_bytes()


def test_render_depends_only_on_seed_and_index():
    cfg = small_config()
    plan = dg.plan_records(cfg)
    idx, rec = plan[123]
    a = dg.render_sample(cfg, idx, rec)[1]
    b = dg.render_sample(cfg, idx, rec)[1]
    assert np.array_equal(a, b)
    other = dg.render_sample(replace(cfg, seed=cfg.seed + 1), idx, rec)[1]
    assert not np.array_equal(a, other)


def test_header_stats_match_recomputation(bench):
    _, manifest, out = bench
    data = load_manifest(out / "manifest.txt")
    images = data.images().transpose(0, 2, 3, 1).astype(np.float64)
    stats = dg.dominance_stats(images, data.labels, data.domain_ids, np.array([manifest.stats["trace_energy"]]))
    for key in ("inter_domain_distance", "within_domain_real_fake_distance", "dominance_factor"):
        assert stats[key] == pytest.approx(manifest.stats[key], rel=1e-6)


def test_dominance_holds(bench):
    _, manifest, _ = bench
    assert manifest.stats["dominance_factor"] >= 3
    assert manifest.stats["trace_to_domain_ratio"] <= 0.25


def test_default_benchmark_dominance(tmp_path):
    manifest = dg.generate_benchmark(dg.default_benchmark_config(), tmp_path)
    assert manifest.stats["dominance_factor"] >= 3
    assert manifest.stats["trace_to_domain_ratio"] <= 0.25


def test_manifest_round_trip(bench):
    _, manifest, out = bench
    again = dg.read_manifest(out / "manifest.txt")
    assert again.to_text() == manifest.to_text()
    assert again.config == manifest.config


def test_manifest_header_fields(bench):
    cfg, _, out = bench
    lines = (out / "manifest.txt").read_text().splitlines()
    assert lines[0] == dg.MANIFEST_MAGIC
    assert json.loads(lines[1].removeprefix("# config: "))["seed"] == cfg.seed
    assert lines[4] == "relative_path\tlabel\tdomain_id\tsplit"


@pytest.mark.parametrize(
    "bad, fragment",
    [
        ("a.png\t2\t0\ttrain", "label must be 0 or 1"),
        ("a.png\t1\t0\tdev", "unknown split"),
        ("a.png\t1\t0", "expected 4 fields"),
        ("a.png\tx\t0\ttrain", "non-integer"),
    ],
)
def test_malformed_manifest_rejected(tmp_path, bad, fragment):
    p = tmp_path / "manifest.txt"
    p.write_text(f"{dg.MANIFEST_MAGIC}\nrelative_path\tlabel\tdomain_id\tsplit\n{bad}\n")
    with pytest.raises(ValueError, match=fragment):
        dg.read_manifest(p)


def test_config_reports_every_violation():
    d = dg.DomainSpec(0, "plaid", (0.5, 0.5, 1.5), -1.0, 0.5, "smudge")
    cfg = dg.BenchmarkConfig((d, replace(d, texture_kind="stripes")), 10, 16, 0, (9,))
    errs = cfg.validate()
    joined = " | ".join(errs)
    for fragment in ("texture_kind", "trace_kind", "color_mean", "trace_amplitude", "color_jitter",
                     "unique", "image_size", "images_per_domain", "holdout"):
        assert fragment in joined
    with pytest.raises(dg.ConfigError) as info:
        cfg.check()
    assert info.value.violations == errs


def test_similar_domains_rejected():
    a = dg.DomainSpec(0, "stripes", (0.5, 0.5, 0.5), 0.03, 0.1, "ellipse")
    b = dg.DomainSpec(1, "stripes", (0.6, 0.5, 0.5), 0.03, 0.1, "ripple")
    assert any("colours only" in e for e in dg.BenchmarkConfig((a, b)).validate())
    assert not dg.BenchmarkConfig((a, replace(b, texture_kind="checker"))).validate()


def test_holdout_needs_unseen_trace_kind():
    a = dg.DomainSpec(0, "stripes", (0.5, 0.5, 0.5), 0.03, 0.1, "ellipse")
    b = dg.DomainSpec(1, "checker", (0.2, 0.5, 0.5), 0.03, 0.1, "ellipse")
    assert any("reuses training trace kind" in e for e in dg.BenchmarkConfig((a, b), holdout_domain_ids=(1,)).validate())


# -- traces -------------------------------------------------------------------


def _spec(kind, amp=0.1):
    return dg.DomainSpec(0, "stripes", (0.5, 0.5, 0.5), 0.0, amp, kind)


@pytest.mark.parametrize("kind", dg.TRACE_KINDS)
def test_trace_is_localized_and_bounded(kind):
    for seed in range(10):
        field, mask = dg.trace_field(_spec(kind), 32, np.random.default_rng(seed))
        assert np.all(field[~mask] == 0)
        assert np.abs(field).max() <= 0.1 + 1e-12
        assert 0.05 <= mask.mean() <= 0.2


@pytest.mark.parametrize("kind", dg.TRACE_KINDS)
def test_inject_on_mid_grey_is_exact_addition(kind):
    grey = np.full((32, 32, 3), 0.5)
    out = dg.inject_trace(grey, _spec(kind), np.random.default_rng(1))
    field, _ = dg.trace_field(_spec(kind), 32, np.random.default_rng(1))
    np.testing.assert_array_equal(out, grey + field)


def test_inject_clamps_to_unit_range():
    white = np.ones((32, 32, 3))
    out = dg.inject_trace(white, _spec("channel_offset", 0.2), np.random.default_rng(0))
    assert out.max() <= 1.0 and out.min() >= 0.0
    assert out[..., 0].min() == 1.0  # red is pushed up and clipped
    assert out[..., 2].min() < 1.0


def test_inject_rejects_out_of_range_image():
    with pytest.raises(ValueError):
        dg.inject_trace(np.full((32, 32, 3), 1.5), _spec("ellipse"), np.random.default_rng(0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(dg.TEXTURE_KINDS))
def test_clean_render_in_unit_range(seed, texture):
    spec = dg.DomainSpec(0, texture, (0.5, 0.4, 0.6), 0.03, 0.1, "ellipse", blemish_amplitude=0.05)
    img = dg.render_clean(spec, 32, np.random.default_rng(seed))
    assert img.shape == (32, 32, 3)
    assert img.min() >= 0 and img.max() <= 1


def test_train_fraction_moves_samples_to_val():
    cfg = small_config()
    doms = (replace(cfg.domains[0], train_real_fraction=0.25),) + cfg.domains[1:]
    plan = [r for _, r in dg.plan_records(replace(cfg, domains=doms))]
    c = Counter((r.domain_id, r.label, r.split) for r in plan)
    assert c[(0, 0, "train")] == 15 and c[(0, 0, "val")] == 65 and c[(0, 0, "test")] == 20
    assert c[(0, 1, "train")] == 60
