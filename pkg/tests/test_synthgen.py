import dataclasses
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bgdet import synthgen as G
from bgdet.boxes import Annotation

CFG = G.GeneratorConfig()


def rect(x1, y1, x2, y2, attenuation):
    return G.ObjectSpec(shape_kind="clutter_rect", attenuation=attenuation,
                        center=((x1 + x2) / 2, (y1 + y2) / 2), rotation=0.0,
                        scale=0.0, extra=((x2 - x1) / 2, (y2 - y1) / 2))


# ---------------------------------------------------------------------------
# Multiplicative rendering
# ---------------------------------------------------------------------------


def test_render_empty_scene_transmits_fully():
    out = G.render_transmissive([], (16, 16))
    np.testing.assert_array_equal(out, np.ones((16, 16)))


def test_render_single_object():
    out = G.render_transmissive([rect(2, 2, 10, 10, 0.3)], (16, 16))
    covered = out[3:9, 3:9]
    np.testing.assert_allclose(covered, 0.7, rtol=1e-12)
    assert out[0, 0] == 1.0 and out[15, 15] == 1.0


def test_render_overlap_multiplies():
    objs = [rect(0, 0, 12, 12, 0.5), rect(4, 4, 16, 16, 0.5)]
    out = G.render_transmissive(objs, (16, 16))
    np.testing.assert_allclose(out[6:10, 6:10], 0.25, rtol=1e-12)
    np.testing.assert_allclose(out[1:3, 1:3], 0.5, rtol=1e-12)


def test_object_attenuation_validated():
    with pytest.raises(ValueError, match="attenuation"):
        rect(0, 0, 4, 4, 1.0)


def test_threat_shapes_render_nonempty():
    for kind in ("knife", "blunt", "gun", "lag"):
        spec = G.ObjectSpec(shape_kind=kind, attenuation=0.6, center=(32.0, 32.0),
                            rotation=0.7, scale=12.0)
        assert G.object_mask(spec, (64, 64)).sum() >= 16


# ---------------------------------------------------------------------------
# Scene generation: target shift and determinism
# ---------------------------------------------------------------------------


def test_soc_scene_has_no_annotations():
    for seed in range(10):
        _, anns = G.generate_scene(CFG, G.SOC, seed)
        assert anns == []


def test_hc_scene_annotation_contract():
    for seed in range(10):
        img, anns = G.generate_scene(CFG, G.HC, seed)
        assert 1 <= len(anns) <= 3
        for a in anns:
            assert 1 <= a.class_id <= 4
            x1, y1, x2, y2 = a.box
            assert 0 <= x1 < x2 <= 64 and 0 <= y1 < y2 <= 64


def test_annotation_boxes_are_tight():
    img, anns = G.generate_scene(CFG, G.HC, 5)
    # the most attenuated pixel of each threat lies inside some box
    rng_obj, _ = G.scene_streams(5)
    for a in anns:
        x1, y1, x2, y2 = a.box
        sub = img.pixels[int(y1):int(y2), int(x1):int(x2)]
        assert sub.size > 0 and sub.min() < 0.5


def test_same_seed_bit_identical():
    a, anns_a = G.generate_scene(CFG, G.HC, 777)
    b, anns_b = G.generate_scene(CFG, G.HC, 777)
    assert a.pixels.tobytes() == b.pixels.tobytes()
    assert anns_a == anns_b


def test_different_seeds_differ():
    a, _ = G.generate_scene(CFG, G.SOC, 1)
    b, _ = G.generate_scene(CFG, G.SOC, 2)
    assert a.pixels.tobytes() != b.pixels.tobytes()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 63 - 1), st.sampled_from([G.HC, G.SOC]))
def test_pixels_stay_in_unit_interval(seed, domain):
    img, _ = G.generate_scene(CFG, domain, seed)
    assert img.pixels.dtype == np.float32
    assert img.pixels.min() > 0.0
    assert img.pixels.max() <= 1.0


def test_unplaceable_threat_raises():
    cfg = dataclasses.replace(CFG, threat_scale=(0.3, 0.4))
    with pytest.raises(RuntimeError, match="place"):
        G.generate_scene(cfg, G.HC, 0)


def test_soc_decoys_darken_scenes_but_stay_unannotated():
    quiet = dataclasses.replace(
        CFG, soc_clutter_range=(0, 0), soc_decoy_range=(2, 2),
        nuisance=G.DomainNuisanceConfig(
            soc_edge_crop_prob=0.0, soc_noise_sigma=0.0, soc_texture_amplitude=0.0))
    none = dataclasses.replace(quiet, soc_decoy_range=(0, 0))
    for seed in range(5):
        with_decoys, anns = G.generate_scene(quiet, G.SOC, seed)
        assert anns == []
        # decoys share threat material bands; the lightest band still leaves
        # pixels at or below 1 - 0.44
        assert with_decoys.pixels.min() <= np.float32(0.56)
        empty, _ = G.generate_scene(none, G.SOC, seed)
        np.testing.assert_array_equal(empty.pixels, np.ones((64, 64), np.float32))


def test_hc_scenes_ignore_decoy_config():
    more = dataclasses.replace(CFG, soc_decoy_range=(3, 3))
    for seed in range(5):
        a, anns_a = G.generate_scene(CFG, G.HC, seed)
        b, anns_b = G.generate_scene(more, G.HC, seed)
        assert a.pixels.tobytes() == b.pixels.tobytes()
        assert anns_a == anns_b


def test_probe_scenes_draw_decoys_like_soc():
    # with the SOC object stream quiet except decoys, an injected-threat probe
    # scene still differs from the decoy-free variant on the same seed
    quiet = dataclasses.replace(
        CFG, soc_clutter_range=(0, 0), soc_decoy_range=(2, 2),
        nuisance=G.DomainNuisanceConfig(
            soc_edge_crop_prob=0.0, soc_noise_sigma=0.0, soc_texture_amplitude=0.0))
    none = dataclasses.replace(quiet, soc_decoy_range=(0, 0))
    a, anns_a = G.generate_scene(quiet, G.SOC, 11, inject_threats=True)
    b, anns_b = G.generate_scene(none, G.SOC, 11, inject_threats=True)
    assert anns_a == anns_b and len(anns_a) >= 1
    assert a.pixels.tobytes() != b.pixels.tobytes()


def test_generation_pure_under_threads():
    seeds = list(range(8))
    seq = [G.generate_scene(CFG, G.HC, s)[0].pixels.tobytes() for s in seeds]
    with ThreadPoolExecutor(max_workers=4) as pool:
        par = list(pool.map(lambda s: G.generate_scene(CFG, G.HC, s)[0].pixels.tobytes(), seeds))
    assert seq == par


# ---------------------------------------------------------------------------
# Nuisance independence from scene content
# ---------------------------------------------------------------------------


def test_nuisance_stream_ignores_object_draws():
    canvas = (64, 64)
    _, nuis_a = G.scene_streams(99)
    fields_a = G.nuisance_fields(canvas, G.SOC, CFG.nuisance, nuis_a)

    rng_obj, nuis_b = G.scene_streams(99)
    rng_obj.uniform(size=500)  # a very different object history
    fields_b = G.nuisance_fields(canvas, G.SOC, CFG.nuisance, nuis_b)

    assert set(fields_a) == set(fields_b)
    for k in fields_a:
        np.testing.assert_array_equal(fields_a[k], fields_b[k])


def test_hc_and_soc_nuisances_are_distinct():
    _, nuis = G.scene_streams(4)
    hc = G.nuisance_fields((64, 64), G.HC, CFG.nuisance, nuis)
    _, nuis = G.scene_streams(4)
    soc = G.nuisance_fields((64, 64), G.SOC, CFG.nuisance, nuis)
    assert "vignette" in hc and "stripes" in hc and "texture" not in hc
    assert "texture" in soc and "vignette" not in soc


def test_probe_scene_injects_threats_under_soc_branch():
    # zero-nuisance SOC config: an uncovered corner pixel must stay exactly 1.0,
    # while the same seed under HC is vignetted below 1.0
    quiet = dataclasses.replace(
        CFG,
        threat_scale=(9.0, 9.5),
        hc_clutter_range=(0, 0),
        soc_clutter_range=(0, 0),
        nuisance=G.DomainNuisanceConfig(
            hc_vignette=0.5, hc_stripe_amplitude=0.0, hc_noise_sigma=0.0,
            soc_edge_crop_prob=0.0, soc_noise_sigma=0.0, soc_texture_amplitude=0.0),
    )
    for seed in range(5):
        probe, anns = G.generate_scene(quiet, G.SOC, seed, inject_threats=True)
        assert len(anns) >= 1
        assert probe.pixels[0, 0] == np.float32(1.0)
        hc, _ = G.generate_scene(quiet, G.HC, seed)
        assert hc.pixels[0, 0] < np.float32(0.8)


# ---------------------------------------------------------------------------
# Image file format
# ---------------------------------------------------------------------------


def test_image_roundtrip_bit_exact(tmp_path):
    img, _ = G.generate_scene(CFG, G.SOC, 31)
    path = tmp_path / "a.xbg"
    G.save_image(path, img.pixels)
    back = G.load_image(path)
    assert back.dtype == np.float32
    assert back.tobytes() == img.pixels.tobytes()


def test_image_header_layout(tmp_path):
    path = tmp_path / "b.xbg"
    G.save_image(path, np.ones((2, 3), dtype=np.float32))
    blob = path.read_bytes()
    assert blob[:4] == b"XBG1"
    assert np.frombuffer(blob[4:16], dtype="<u4").tolist() == [2, 3, 1]
    assert len(blob) == 16 + 4 * 6


def test_image_bad_magic_and_truncation(tmp_path):
    bad = tmp_path / "bad.xbg"
    bad.write_bytes(b"WHAT" + b"\x00" * 12)
    with pytest.raises(ValueError, match="magic"):
        G.load_image(bad)
    short = tmp_path / "short.xbg"
    short.write_bytes(b"XBG1" + np.array([4, 4, 1], dtype="<u4").tobytes() + b"\x00" * 8)
    with pytest.raises(ValueError, match="truncated"):
        G.load_image(short)


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def _tiny_manifest():
    return G.DatasetManifest(
        version=1, config_hash=G.config_hash(CFG), domain=G.HC, split="train",
        samples=[G.Sample(path="hc_train/000000.xbg", seed=12,
                          annotations=[Annotation(1, (1.0, 2.0, 9.5, 11.25))])])


def test_manifest_roundtrip_exact(tmp_path):
    m = _tiny_manifest()
    path = tmp_path / "m.json"
    G.save_manifest(m, path)
    assert G.load_manifest(path) == m
    # a second save is byte-identical
    text = path.read_bytes()
    G.save_manifest(m, path)
    assert path.read_bytes() == text


def test_manifest_invariants_enforced():
    m = _tiny_manifest()
    m.samples[0].annotations = []
    with pytest.raises(ValueError, match="no annotations"):
        G.validate_manifest(m)

    m = _tiny_manifest()
    m.domain = G.SOC
    with pytest.raises(ValueError, match="annotations"):
        G.validate_manifest(m)

    m = _tiny_manifest()
    m.split = "probe"
    m.domain = G.SOC
    G.validate_manifest(m)  # probe images carry annotations by design


def test_config_hash_stable_and_sensitive():
    assert G.config_hash(CFG) == G.config_hash(G.GeneratorConfig())
    other = dataclasses.replace(CFG, image_size=96)
    assert G.config_hash(other) != G.config_hash(CFG)


def test_config_from_dict():
    cfg = G.generator_config_from_dict(
        {"image_size": 96, "threat_scale": [10, 14], "nuisance": {"hc_vignette": 0.1}})
    assert cfg.image_size == 96
    assert cfg.threat_scale == (10, 14)
    assert cfg.nuisance.hc_vignette == 0.1
    with pytest.raises(ValueError, match="unknown"):
        G.generator_config_from_dict({"imagesize": 96})
    with pytest.raises(TypeError):
        G.generator_config_from_dict({"nuisance": {"bogus": 1}})


# ---------------------------------------------------------------------------
# Dataset writer
# ---------------------------------------------------------------------------

COUNTS = G.SplitCounts(hc_train=3, soc_train=4, hc_test=2, soc_test=2, probe=2)


def _tree_bytes(root):
    return {p.relative_to(root): p.read_bytes() for p in sorted(Path(root).rglob("*")) if p.is_file()}


def test_generate_dataset_layout_and_invariants(tmp_path):
    manifests = G.generate_dataset(CFG, COUNTS, base_seed=5000, out_dir=tmp_path)
    assert set(manifests) == {"hc_train", "soc_train", "hc_test", "soc_test", "probe"}
    for name, m in manifests.items():
        G.validate_manifest(m)
        loaded = G.load_manifest(tmp_path / f"{name}.json")
        assert loaded == m
        for s in m.samples:
            img = G.load_sample(tmp_path, s)
            assert img.shape == (64, 64)
    assert all(len(s.annotations) >= 1 for s in manifests["hc_train"].samples)
    assert all(s.annotations == [] for s in manifests["soc_train"].samples)
    assert all(len(s.annotations) >= 1 for s in manifests["probe"].samples)


def test_generate_dataset_seeds_unique(tmp_path):
    manifests = G.generate_dataset(CFG, COUNTS, base_seed=9999, out_dir=tmp_path)
    seeds = [s.seed for m in manifests.values() for s in m.samples]
    assert len(seeds) == len(set(seeds))


def test_generate_dataset_regeneration_byte_identical(tmp_path):
    G.generate_dataset(CFG, COUNTS, base_seed=321, out_dir=tmp_path / "a")
    G.generate_dataset(CFG, COUNTS, base_seed=321, out_dir=tmp_path / "b")
    assert _tree_bytes(tmp_path / "a") == _tree_bytes(tmp_path / "b")


def test_generate_dataset_cleanup_on_failure(tmp_path, monkeypatch):
    calls = {"n": 0}
    real = G.save_image

    def failing(path, pixels):
        calls["n"] += 1
        if calls["n"] > 5:
            raise OSError("disk full")
        real(path, pixels)

    monkeypatch.setattr(G, "save_image", failing)
    with pytest.raises(OSError, match="disk full"):
        G.generate_dataset(CFG, COUNTS, base_seed=1, out_dir=tmp_path)
    assert [p for p in tmp_path.rglob("*") if p.is_file()] == []
