import math

import numpy as np
import pytest

from fedprompt import autodiff as ad
from fedprompt.autodiff import ShapeError, constant, parameter
from fedprompt.encoders import (
    FrozenViTConfig,
    augment,
    build_frozen_vit,
    encode,
    encode_sequence,
    load_text_embeddings,
    patchify,
    save_text_embeddings,
    sinusoidal_positions,
    synth_text_embeddings,
)
from fedprompt.fileio import FormatError


def tiny_config(**overrides):
    kw = dict(patch_grid=2, d_v=16, feature_dim=8, depth=1, heads=2, seed=11)
    kw.update(overrides)
    return FrozenViTConfig(**kw)


def rand_image(rng, h=8, w=8):
    return rng.normal(size=(h, w)).astype(np.float32)


def test_same_seed_identical_checksums():
    v1 = build_frozen_vit(tiny_config())
    v2 = build_frozen_vit(tiny_config())
    assert v1.weights_checksum() == v2.weights_checksum()
    assert build_frozen_vit(tiny_config(seed=12)).weights_checksum() != v1.weights_checksum()


def test_depth_zero_rejected():
    with pytest.raises(ValueError):
        tiny_config(depth=0)


def test_heads_divisibility_rejected():
    with pytest.raises(ValueError):
        tiny_config(d_v=10, heads=4)


def test_zero_image_forward_finite():
    vit = build_frozen_vit(tiny_config())
    pack = patchify(np.zeros((8, 8), np.float32), vit)
    v = encode(vit, pack.cls, pack.patches)
    assert np.isfinite(v.data).all()


def test_patchify_shapes_and_determinism():
    vit = build_frozen_vit(tiny_config())
    img = rand_image(np.random.default_rng(0))
    p1 = patchify(img, vit)
    p2 = patchify(img.copy(), vit)
    assert p1.patches.shape == (4, 16)
    assert (p1.patches == p2.patches).all() and (p1.cls == p2.cls).all()


def test_patchify_indivisible_dims():
    vit = build_frozen_vit(tiny_config(patch_grid=3))
    with pytest.raises(ShapeError):
        patchify(np.zeros((8, 8), np.float32), vit)


def test_patch_translation_permutes_content_rows():
    # shifting by a whole patch moves patch contents to a different row
    vit = build_frozen_vit(tiny_config())
    rng = np.random.default_rng(3)
    img = rand_image(rng)
    shifted = np.roll(img, 4, axis=1)  # one patch to the right
    pe = sinusoidal_positions(4, 16, np.float32)
    content = patchify(img, vit).patches - pe
    content_shifted = patchify(shifted, vit).patches - pe
    # patch columns swap within each patch row: (0,1)->(1,0), (2,3)->(3,2)
    perm = [1, 0, 3, 2]
    np.testing.assert_allclose(content_shifted, content[perm], atol=1e-5)


def test_encode_sequence_lengths_and_norm():
    vit = build_frozen_vit(tiny_config())
    img = rand_image(np.random.default_rng(1))
    pack = patchify(img, vit)
    prompts = constant(np.random.default_rng(2).normal(size=(4, 16)).astype(np.float32))
    v = encode(vit, pack.cls, pack.patches, prompts)
    assert v.shape == (1, 8)
    assert abs(np.linalg.norm(v.data) - 1.0) < 1e-6
    v_plain = encode(vit, pack.cls, pack.patches)
    assert abs(np.linalg.norm(v_plain.data) - 1.0) < 1e-6
    assert not np.allclose(v.data, v_plain.data)


def test_encode_matches_explicit_concatenation():
    vit = build_frozen_vit(tiny_config())
    pack = patchify(rand_image(np.random.default_rng(4)), vit)
    prompts = constant(np.random.default_rng(5).normal(size=(3, 16)).astype(np.float32))
    via_encode = encode(vit, pack.cls, pack.patches, prompts)
    seq = ad.concat_rows([constant(pack.cls), constant(pack.patches), prompts])
    via_sequence = encode_sequence(vit, seq)
    assert (via_encode.data == via_sequence.data).all()


def test_encode_width_mismatch():
    vit = build_frozen_vit(tiny_config())
    pack = patchify(rand_image(np.random.default_rng(6)), vit)
    with pytest.raises(ShapeError):
        encode(vit, pack.cls, pack.patches, constant(np.zeros((2, 8), np.float32)))


def test_prompt_gradient_matches_finite_differences():
    vit = build_frozen_vit(tiny_config(), dtype=np.float64)
    pack = patchify(rand_image(np.random.default_rng(7)).astype(np.float64), vit)
    prompts = parameter(np.random.default_rng(8).normal(0, 0.1, (2, 16)))
    target = constant(np.random.default_rng(9).normal(size=(1, 8)))

    def fn():
        v = encode(vit, pack.cls, pack.patches, prompts)
        return ad.cosine_sim(v, target)

    err = ad.finite_difference_check(fn, {"prompts": prompts}, step=1e-5)
    assert err < 1e-6
    ad.backward(fn())
    assert np.abs(prompts.grad).max() > 0.0


def test_frozen_weights_unchanged_by_gradient_flow():
    vit = build_frozen_vit(tiny_config())
    before = vit.weights_checksum()
    pack = patchify(rand_image(np.random.default_rng(10)), vit)
    prompts = parameter(np.random.default_rng(11).normal(size=(2, 16)).astype(np.float32))
    ad.backward(ad.mean(encode(vit, pack.cls, pack.patches, prompts)))
    assert vit.weights_checksum() == before


# ---------------------------------------------------------------------------
# augmentation


def test_augment_identity_when_disabled():
    img = rand_image(np.random.default_rng(12))
    np.testing.assert_array_equal(augment(img, 5, max_shift=0, noise_scale=0.0), img)


def test_augment_deterministic_per_seed():
    img = rand_image(np.random.default_rng(13))
    a = augment(img, seed=42)
    b = augment(img, seed=42)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, augment(img, seed=43))


def test_augment_noise_folded_mean():
    # mean |x' - x| for zero shift is std * 0.05 * sqrt(2/pi)
    rng = np.random.default_rng(14)
    img = rng.normal(0, 2.0, size=(64, 64)).astype(np.float64)
    diffs = []
    for seed in range(40):
        out = augment(img, seed, max_shift=0, noise_scale=0.05)
        diffs.append(np.abs(out - img).mean())
    expected = 0.05 * img.std() * math.sqrt(2 / math.pi)
    assert np.mean(diffs) == pytest.approx(expected, rel=0.05)


# ---------------------------------------------------------------------------
# text embeddings


def test_synth_shared_attribute_component():
    attrs = {"hen": ["two legs", "beak"], "seagull": ["two legs", "white"]}
    store = synth_text_embeddings(["hen", "seagull"], attrs, d_t=32, seed=1)
    np.testing.assert_array_equal(store.attribute_rows("hen")[0], store.attribute_rows("seagull")[0])
    assert not np.array_equal(store.attribute_rows("hen")[1], store.attribute_rows("seagull")[1])


def test_synth_row_counts_and_norms():
    store = synth_text_embeddings(["a"], {"a": ["only"]}, d_t=16, seed=2)
    assert store.composite_rows("a").shape == (1, 16)
    assert abs(np.linalg.norm(store.composite_rows("a")) - 1.0) < 1e-6


def test_synth_empty_attribute_list_rejected():
    with pytest.raises(ValueError):
        synth_text_embeddings(["a"], {"a": []}, d_t=16, seed=3)


def test_unrelated_class_vectors_near_orthogonal():
    # Monte-Carlo over 1000 draws: mean |cos| stays within 3/sqrt(d_t)
    d_t = 64
    coss = []
    for seed in range(1000):
        store = synth_text_embeddings([f"x{seed}", f"y{seed}"],
                                      {f"x{seed}": [f"p{seed}"], f"y{seed}": [f"q{seed}"]},
                                      d_t=d_t, seed=seed)
        a = store.composite_rows(f"x{seed}")[0]
        b = store.composite_rows(f"y{seed}")[0]
        coss.append(float(a @ b))
    assert abs(np.mean(coss)) < 3 / math.sqrt(d_t)
    assert np.percentile(np.abs(coss), 99) < 3 * 1.5 / math.sqrt(d_t)


def test_embedding_file_round_trip_bit_identical(tmp_path):
    store = synth_text_embeddings(["cat", "dog"], {"cat": ["whiskers", "tail"], "dog": ["tail"]},
                                  d_t=24, seed=4)
    path = tmp_path / "store.fmve"
    save_text_embeddings(path, store)
    loaded = load_text_embeddings(path)
    assert loaded.checksum() == store.checksum()
    assert loaded.class_names == ["cat", "dog"]


def test_embedding_file_truncation_names_offset(tmp_path):
    store = synth_text_embeddings(["cat"], {"cat": ["whiskers"]}, d_t=8, seed=5)
    path = tmp_path / "store.fmve"
    save_text_embeddings(path, store)
    blob = path.read_bytes()
    clipped = tmp_path / "clipped.fmve"
    clipped.write_bytes(blob[:-10])
    with pytest.raises(FormatError, match="byte offset"):
        load_text_embeddings(clipped)


def test_embedding_file_bad_magic(tmp_path):
    path = tmp_path / "bad.fmve"
    path.write_bytes(b"NOPE" + bytes(32))
    with pytest.raises(FormatError, match="magic"):
        load_text_embeddings(path)


def test_embedding_file_corruption_fuzz(tmp_path):
    store = synth_text_embeddings(["cat", "dog"], {"cat": ["w", "t"], "dog": ["t"]}, d_t=8, seed=6)
    path = tmp_path / "store.fmve"
    save_text_embeddings(path, store)
    blob = path.read_bytes()
    for cut in range(5, len(blob), max(1, len(blob) // 13)):
        target = tmp_path / "cut.fmve"
        target.write_bytes(blob[:cut])
        with pytest.raises(FormatError):
            load_text_embeddings(target)


def test_store_subset_and_attribute_matrix():
    store = synth_text_embeddings(["a", "b", "c"],
                                  {"a": ["x"], "b": ["x", "y"], "c": ["z"]}, d_t=8, seed=7)
    sub = store.subset(["b", "c"])
    assert sub.class_names == ["b", "c"]
    mat = store.attribute_matrix(["a", "b"])
    assert mat.shape == (3, 8)
