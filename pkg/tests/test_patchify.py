import struct

import numpy as np
import pytest

from codecpatch.errors import ConfigError, InputFormatError, InvariantError
from codecpatch.ingest import partition_gops
from codecpatch.layout_io import layout_records, read_layout, write_layout
from codecpatch.patchify import (
    FRAME_TYPE_I,
    FRAME_TYPE_P,
    FRAME_TYPE_STATIC,
    TokenLayout,
    frame_patches,
    intervene,
    patchify_chunk,
    patchify_codec,
    patchify_image,
    token_accounting,
    virtual_time,
)
from codecpatch.saliency import PatchMask

from conftest import noise_clip


def full_mask(t, gh, gw):
    return PatchMask(selected=tuple((y, x) for y in range(gh) for x in range(gw)),
                     frame_index=t, grid_h=gh, grid_w=gw)


def empty_mask(t, gh, gw):
    return PatchMask(selected=(), frame_index=t, grid_h=gh, grid_w=gw)


def some_mask(t, gh, gw, coords):
    return PatchMask(selected=tuple(sorted(coords)), frame_index=t,
                     grid_h=gh, grid_w=gw)


def codec_layout(clip, gop_length, mask_fn):
    gops = partition_gops(clip, gop_length)
    masks = [mask_fn(t, clip.grid_h, clip.grid_w)
             for t in gops.p_frame_indices()]
    return patchify_codec(clip, gops, masks), gops


def test_codec_all_empty_masks_two_gops():
    clip = noise_clip(t=64, h=56, w=56, seed=0)
    layout, _ = codec_layout(clip, 32, empty_mask)
    assert layout.token_count == 2 * 16  # P0 = 16 at 56x56/14
    assert (layout.frame_types == FRAME_TYPE_I).all()


def test_codec_token_order_and_payloads():
    clip = noise_clip(t=4, h=28, w=28, seed=1)
    gops = partition_gops(clip, 4)
    masks = [some_mask(1, 2, 2, [(1, 1), (0, 1)]),
             some_mask(2, 2, 2, [(1, 0)]),
             empty_mask(3, 2, 2)]
    layout = patchify_codec(clip, gops, masks)
    # I-frame first, row-major; then P-frames in mask (y, x) order
    want = [(0, 0, 0, FRAME_TYPE_I), (0, 0, 1, FRAME_TYPE_I),
            (0, 1, 0, FRAME_TYPE_I), (0, 1, 1, FRAME_TYPE_I),
            (1, 0, 1, FRAME_TYPE_P), (1, 1, 1, FRAME_TYPE_P),
            (2, 1, 0, FRAME_TYPE_P)]
    got = [(int(layout.source_ts[i]), int(layout.positions[i, 1]),
            int(layout.positions[i, 2]), int(layout.frame_types[i]))
           for i in range(layout.token_count)]
    assert got == want
    # payload equals the source frame's patch pixels
    patches = frame_patches(clip.frames[1], 14)
    assert np.array_equal(layout.payloads[4], patches[0, 1])
    # virtual grid mapping: T=4 onto 64 -> stride 16
    assert [int(t) for t in layout.positions[:, 0]] == [0, 0, 0, 0, 16, 16, 32]


def test_codec_missing_mask_raises():
    clip = noise_clip(t=3, h=28, w=28, seed=2)
    gops = partition_gops(clip, 3)
    with pytest.raises(InvariantError, match="missing mask"):
        patchify_codec(clip, gops, [empty_mask(1, 2, 2)])


def test_codec_mask_geometry_mismatch():
    clip = noise_clip(t=2, h=28, w=28, seed=3)
    gops = partition_gops(clip, 2)
    with pytest.raises(Exception, match="grid"):
        patchify_codec(clip, gops, [empty_mask(1, 4, 4)])


def test_codec_rejects_too_many_frames_for_grid():
    clip = noise_clip(t=70, h=28, w=28, seed=4)
    gops = partition_gops(clip, 32)
    masks = [empty_mask(t, 2, 2) for t in gops.p_frame_indices()]
    with pytest.raises(ConfigError, match="grid"):
        patchify_codec(clip, gops, masks)


def test_virtual_time_order_preserving():
    rng = np.random.default_rng(5)
    for _ in range(100):
        t_total = int(rng.integers(1, 65))
        ts = sorted(rng.integers(0, t_total, size=8))
        mapped = [virtual_time(t, t_total, 64) for t in ts]
        assert mapped == sorted(mapped)
        assert all(0 <= v < 64 for v in mapped)


def test_chunk_intervals_respected():
    clip = noise_clip(t=64, h=28, w=28, seed=6)
    for seed in range(20):
        layout = patchify_chunk(clip, 8, seed=seed)
        assert layout.token_count == 8 * 4
        for c in range(8):
            tokens = layout.source_ts[layout.positions[:, 0] == c]
            t_c = int(tokens[0])
            assert (tokens == t_c).all()
            assert 8 * c <= t_c < 8 * (c + 1)


def test_chunk_equal_frame_count_samples_all():
    clip = noise_clip(t=8, h=28, w=28, seed=7)
    layout = patchify_chunk(clip, 8, seed=123)
    assert [int(t) for t in sorted(set(layout.source_ts))] == list(range(8))
    for c in range(8):
        assert set(layout.source_ts[layout.positions[:, 0] == c]) == {c}


def test_chunk_token_count_c_times_p0():
    clip = noise_clip(t=16, h=112, w=112, seed=8)  # P0 = 64
    layout = patchify_chunk(clip, 8, seed=0)
    assert layout.token_count == 8 * 64


def test_chunk_seed_reproducible_and_errors():
    clip = noise_clip(t=16, h=28, w=28, seed=9)
    a = patchify_chunk(clip, 4, seed=11)
    b = patchify_chunk(clip, 4, seed=11)
    assert np.array_equal(a.source_ts, b.source_ts)
    assert np.array_equal(a.payloads, b.payloads)
    with pytest.raises(ConfigError):
        patchify_chunk(clip, 17, seed=0)
    with pytest.raises(ConfigError):
        patchify_chunk(clip, 0, seed=0)


def test_image_row_major():
    clip = noise_clip(t=1, h=224, w=224, seed=10)
    layout = patchify_image(clip)
    assert layout.token_count == 256
    assert tuple(layout.positions[0]) == (0, 0, 0)
    assert tuple(layout.positions[16]) == (0, 1, 0)
    assert (layout.frame_types == FRAME_TYPE_STATIC).all()
    assert (layout.positions[:, 0] == 0).all()


def test_image_448_and_nonsquare():
    layout = patchify_image(noise_clip(t=1, h=448, w=448, seed=11))
    assert layout.token_count == 1024
    layout = patchify_image(noise_clip(t=1, h=224, w=448, seed=12))
    assert layout.token_count == 512
    # rows-then-columns enumeration oracle
    want = [(y, x) for y in range(16) for x in range(32)]
    got = [(int(p[1]), int(p[2])) for p in layout.positions]
    assert got == want


def test_image_requires_single_frame():
    with pytest.raises(ConfigError):
        patchify_image(noise_clip(t=2, h=28, w=28, seed=13))


def test_accounting_default_config_ratio():
    clip = noise_clip(t=8, h=28, w=28, seed=14)  # P0 = 4
    layout, _ = codec_layout(clip, 4, full_mask)
    acct = token_accounting(layout, dense_t=8)
    assert acct["M"] == 8 * 4
    assert acct["gamma"] == 0.0
    assert all(row["gamma"] == 0.0 for row in acct["per_gop"])


def test_accounting_gamma_sweep():
    # budgets over the 64-frame 256-patch dense grid, from the selection table
    dense = 64 * 256
    for budget, want in [(4096, 0.75), (2048, 0.875), (1024, 0.9375),
                         (512, 0.96875)]:
        gamma = 1.0 - budget / dense
        assert gamma == pytest.approx(want, abs=1e-12)


def test_accounting_matches_mask_sums_fuzz():
    rng = np.random.default_rng(15)
    for _ in range(30):
        t = int(rng.integers(2, 12))
        clip = noise_clip(t=t, h=28, w=28, seed=int(rng.integers(1 << 30)))
        gops = partition_gops(clip, int(rng.integers(2, 6)))
        masks = []
        expected = 0
        for pf in gops.p_frame_indices():
            count = int(rng.integers(0, 5))
            coords = [(y, x) for y in range(2) for x in range(2)]
            idx = rng.choice(4, size=count, replace=False)
            masks.append(some_mask(pf, 2, 2, [coords[i] for i in idx]))
            expected += count
        layout = patchify_codec(clip, gops, masks)
        expected += len(gops.segments) * 4
        acct = token_accounting(layout, dense_t=t)
        assert acct["M"] == expected == layout.token_count
        assert sum(r["tokens"] for r in acct["per_gop"]) == expected


def test_position_uniqueness_enforced():
    payload = np.zeros((2, 14, 14, 3), dtype=np.uint8)
    pos = np.array([[0, 0, 0], [0, 0, 0]], dtype=np.uint16)
    with pytest.raises(InvariantError, match="duplicate"):
        TokenLayout(mode="image", payloads=payload, positions=pos,
                    frame_types=np.zeros(2, np.uint8),
                    source_ts=np.zeros(2, np.uint16), grid_t=64,
                    clip_ref="x", patch_size=14, budget_meta={"P0": 4})


# ---------------------------------------------------------------------------
# interventions

def build_intervention_fixture(seed=0, t=6, h=56, w=56):
    clip = noise_clip(t=t, h=h, w=w, seed=seed, source_id=f"clip{seed}")
    gops = partition_gops(clip, t)
    gh, gw = clip.grid_h, clip.grid_w
    rng = np.random.default_rng(seed + 100)
    masks = []
    for pf in gops.p_frame_indices():
        count = int(rng.integers(1, gh * gw))  # keep at least one unselected
        coords = [(y, x) for y in range(gh) for x in range(gw)]
        idx = rng.choice(len(coords), size=count, replace=False)
        masks.append(some_mask(pf, gh, gw, [coords[i] for i in idx]))
    return clip, patchify_codec(clip, gops, masks)


def test_position_shuffle_preserves_multiset():
    _, layout = build_intervention_fixture(seed=1)
    out = intervene(layout, "position_shuffle", seed=5)
    assert out.token_count == layout.token_count
    p_sel = layout.frame_types == FRAME_TYPE_P
    want = sorted(map(tuple, layout.positions[p_sel].tolist()))
    got = sorted(map(tuple, out.positions[p_sel].tolist()))
    assert want == got
    # payloads untouched, I-frame positions untouched
    assert np.array_equal(out.payloads, layout.payloads)
    assert np.array_equal(out.positions[~p_sel], layout.positions[~p_sel])


def test_nonmotion_swap_payloads_from_unselected():
    clip, layout = build_intervention_fixture(seed=2)
    out = intervene(layout, "nonmotion_swap", seed=7, clip=clip)
    assert np.array_equal(out.positions, layout.positions)
    assert np.array_equal(out.frame_types, layout.frame_types)
    p_idx = np.flatnonzero(layout.frame_types == FRAME_TYPE_P)
    patches_by_t = {t: frame_patches(clip.frames[t], 14)
                    for t in set(int(s) for s in layout.source_ts[p_idx])}
    for i in p_idx:
        t = int(layout.source_ts[i])
        selected = {(int(layout.positions[j, 1]), int(layout.positions[j, 2]))
                    for j in p_idx if layout.source_ts[j] == t}
        # oracle: swapped payload must match some unselected patch and no
        # selected one (noise payloads are unique with overwhelming odds)
        sel_payloads = [patches_by_t[t][y, x] for (y, x) in selected]
        unsel = [(y, x) for y in range(4) for x in range(4)
                 if (y, x) not in selected]
        unsel_payloads = [patches_by_t[t][y, x] for (y, x) in unsel]
        assert not any(np.array_equal(out.payloads[i], p) for p in sel_payloads)
        assert any(np.array_equal(out.payloads[i], p) for p in unsel_payloads)


def test_nonmotion_swap_requires_clip():
    _, layout = build_intervention_fixture(seed=3)
    with pytest.raises(ConfigError, match="clip"):
        intervene(layout, "nonmotion_swap", seed=0)


def test_nonmotion_swap_r1_frame_skipped():
    clip = noise_clip(t=2, h=28, w=28, seed=4, source_id="full")
    gops = partition_gops(clip, 2)
    layout = patchify_codec(clip, gops, [full_mask(1, 2, 2)])
    with pytest.warns(UserWarning, match="no unselected"):
        out = intervene(layout, "nonmotion_swap", seed=0, clip=clip)
    assert np.array_equal(out.payloads, layout.payloads)


def test_crossvideo_swap_replaces_all_p_payloads():
    _, layout = build_intervention_fixture(seed=5)
    _, donor = build_intervention_fixture(seed=6)
    out = intervene(layout, "crossvideo_swap", donor=donor, seed=9)
    assert np.array_equal(out.positions, layout.positions)
    p_idx = np.flatnonzero(layout.frame_types == FRAME_TYPE_P)
    donor_p = donor.payloads[donor.frame_types == FRAME_TYPE_P]
    changed = 0
    for i in p_idx:
        if not np.array_equal(out.payloads[i], layout.payloads[i]):
            changed += 1
        assert any(np.array_equal(out.payloads[i], d) for d in donor_p)
    assert changed == len(p_idx)  # independent noise never collides
    i_idx = np.flatnonzero(layout.frame_types == FRAME_TYPE_I)
    assert np.array_equal(out.payloads[i_idx], layout.payloads[i_idx])


def test_crossvideo_swap_rejects_self_and_missing_donor():
    _, layout = build_intervention_fixture(seed=7)
    with pytest.raises(ConfigError, match="donor"):
        intervene(layout, "crossvideo_swap", seed=0)
    with pytest.raises(ConfigError, match="different clip"):
        intervene(layout, "crossvideo_swap", donor=layout, seed=0)


def test_interventions_reject_non_codec_layouts():
    layout = patchify_image(noise_clip(t=1, h=28, w=28, seed=8))
    with pytest.raises(ConfigError, match="codec"):
        intervene(layout, "position_shuffle", seed=0)


def test_intervention_fuzz_token_count_and_positions():
    rng = np.random.default_rng(16)
    for trial in range(25):
        clip, layout = build_intervention_fixture(seed=200 + trial,
                                                  t=int(rng.integers(2, 7)))
        _, donor = build_intervention_fixture(seed=300 + trial)
        for kind, kwargs in (("position_shuffle", {}),
                             ("nonmotion_swap", {"clip": clip}),
                             ("crossvideo_swap", {"donor": donor})):
            out = intervene(layout, kind, seed=trial, **kwargs)
            assert out.token_count == layout.token_count
            assert len(np.unique(out.positions, axis=0)) == out.token_count
            if kind != "position_shuffle":
                assert np.array_equal(out.positions, layout.positions)


# ---------------------------------------------------------------------------
# exchange format

def test_layout_round_trip(tmp_path):
    _, layout = build_intervention_fixture(seed=9)
    jp, bp = write_layout(tmp_path / "a", layout, {"height": 56, "width": 56})
    back, meta = read_layout(jp)
    assert back.mode == layout.mode
    assert back.token_count == layout.token_count
    assert np.array_equal(back.payloads, layout.payloads)
    assert np.array_equal(back.positions, layout.positions)
    assert np.array_equal(back.frame_types, layout.frame_types)
    assert np.array_equal(back.source_ts, layout.source_ts)
    assert meta["run_config"] == {"height": 56, "width": 56}
    # rewriting the loaded layout reproduces the binary byte for byte
    write_layout(tmp_path / "b", back, {"height": 56, "width": 56})
    assert (tmp_path / "a.ovpt.bin").read_bytes() == \
        (tmp_path / "b.ovpt.bin").read_bytes()


def test_layout_binary_record_layout(tmp_path):
    # independent struct-level decode of the first record
    _, layout = build_intervention_fixture(seed=10)
    _, bp = write_layout(tmp_path / "c", layout, {})
    blob = bp.read_bytes()
    record = 9 + 14 * 14 * 3
    assert len(blob) == layout.token_count * record
    tv, y, x, ft, st = struct.unpack_from("<HHHBH", blob, 0)
    assert (tv, y, x) == tuple(int(v) for v in layout.positions[0])
    assert ft == int(layout.frame_types[0])
    assert st == int(layout.source_ts[0])
    payload = np.frombuffer(blob, np.uint8, count=14 * 14 * 3, offset=9)
    assert np.array_equal(payload.reshape(14, 14, 3), layout.payloads[0])


def test_layout_read_validation(tmp_path):
    _, layout = build_intervention_fixture(seed=11)
    jp, bp = write_layout(tmp_path / "d", layout, {})
    bp.write_bytes(bp.read_bytes()[:-5])
    with pytest.raises(InputFormatError, match="size"):
        read_layout(jp)
    meta = jp.read_text().replace('"version": 1', '"version": 9')
    jp.write_text(meta)
    with pytest.raises(InputFormatError, match="version"):
        read_layout(jp)
    jp.write_text('{"not": "a layout"}')
    with pytest.raises(InputFormatError):
        read_layout(jp)


def test_layout_records_match_arrays():
    _, layout = build_intervention_fixture(seed=12)
    rec = layout_records(layout)
    assert rec.shape == (layout.token_count,)
    assert np.array_equal(rec["t_virtual"], layout.positions[:, 0])
    assert np.array_equal(rec["payload"].reshape(-1, 14, 14, 3),
                          layout.payloads)


def test_nonmotion_swap_rejects_wrong_clip_geometry():
    _, layout = build_intervention_fixture(seed=13)  # 56x56 grid
    small = noise_clip(t=6, h=28, w=28, seed=14)
    with pytest.raises(Exception, match="grid"):
        intervene(layout, "nonmotion_swap", seed=0, clip=small)
