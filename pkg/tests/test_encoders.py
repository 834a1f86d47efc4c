"""Frozen-world construction, encoding paths and persistence."""

from __future__ import annotations

import numpy as np
import pytest

from promptvar import autodiff as ad
from promptvar.autodiff import Tensor
from promptvar.containers import ContainerFormatError, ContainerVersionError, save_arrays
from promptvar.encoders import (
    DEFAULT_TEMPLATE,
    EncoderConfig,
    _pool_matrix,
    encode_image,
    encode_text,
    encode_text_stacked,
    init_frozen,
    load_world,
    random_context,
    save_world,
    tokenize_prompt_text,
    world_checksum,
)


class TestWorldConstruction:
    def test_same_seed_reproduces_every_weight(self, world):
        again = init_frozen(seed=0)
        assert world_checksum(again) == world_checksum(world)
        for name, arr in world.encoder.arrays().items():
            np.testing.assert_array_equal(arr, again.encoder.arrays()[name])
        np.testing.assert_array_equal(world.vocab.embedding, again.vocab.embedding)
        np.testing.assert_array_equal(world.vocab.class_anchors, again.vocab.class_anchors)

    def test_different_seed_changes_checksum(self, world):
        assert world_checksum(init_frozen(seed=7)) != world_checksum(world)

    def test_checksum_detects_weight_mutation(self, world):
        before = world_checksum(world)
        other = init_frozen(seed=0)
        other.encoder.text_w1 = other.encoder.text_w1.copy()
        other.encoder.text_w1.flags.writeable = True
        other.encoder.text_w1[0, 0] += 1e-6
        assert world_checksum(other) != before

    def test_weights_are_read_only(self, world):
        with pytest.raises(ValueError):
            world.encoder.text_w1[0, 0] = 0.0
        with pytest.raises(ValueError):
            world.vocab.class_anchors[0, 0] = 0.0

    def test_class_anchor_rows_are_unit_norm(self, world):
        anchors = world.vocab.class_anchors[world.vocab.class_token_ids]
        np.testing.assert_allclose(np.linalg.norm(anchors, axis=1), 1.0, atol=1e-9)

    def test_anchor_rows_of_non_class_tokens_are_zero(self, world):
        non_class = sorted(set(range(world.config.vocab_size)) - set(world.vocab.class_token_ids))
        np.testing.assert_array_equal(world.vocab.class_anchors[non_class], 0.0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EncoderConfig(context_len=0)
        with pytest.raises(ValueError):
            EncoderConfig(class_pool_weight=0.0)


class TestEncodingPaths:
    def test_text_outputs_are_unit_norm(self, world):
        rng = np.random.default_rng(21)
        seq = rng.normal(size=(world.config.context_len + 1, world.config.embed_dim))
        out = encode_text(world.encoder, seq)
        np.testing.assert_allclose(np.linalg.norm(out), 1.0, atol=1e-9)

    def test_image_outputs_are_unit_norm(self, world):
        rng = np.random.default_rng(22)
        x = rng.normal(size=(6, world.config.image_dim))
        out = encode_image(world.encoder, x)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)

    def test_stacked_encoding_matches_individual_sequences(self, world):
        """One batched call must reproduce per-sequence encodings exactly."""
        rng = np.random.default_rng(23)
        s = world.config.context_len + 1
        seqs = [rng.normal(size=(s, world.config.embed_dim)) for _ in range(4)]
        batched = encode_text_stacked(world.encoder, np.vstack(seqs), 4)
        singles = np.stack([encode_text(world.encoder, q) for q in seqs])
        np.testing.assert_allclose(batched, singles, atol=1e-12)

    def test_tensor_and_array_forward_agree(self, world):
        rng = np.random.default_rng(24)
        s = world.config.context_len + 1
        seq = rng.normal(size=(s, world.config.embed_dim))
        out_arr = encode_text(world.encoder, seq)
        out_t = encode_text(world.encoder, Tensor(seq, requires_grad=True))
        assert isinstance(out_t, Tensor)
        np.testing.assert_allclose(out_t.values, out_arr, atol=1e-12)

    def test_gradients_flow_through_text_encoder(self, world):
        rng = np.random.default_rng(25)
        s = world.config.context_len + 1
        leaf = Tensor(rng.normal(size=(s, world.config.embed_dim)), requires_grad=True)
        encode_text(world.encoder, leaf).sum().backward()
        assert np.all(np.isfinite(leaf.grad))
        assert np.linalg.norm(leaf.grad) > 0

    def test_pool_matrix_rows_are_convex_weights(self):
        pool = _pool_matrix(3, 5, 0.45)
        assert pool.shape == (3, 15)
        np.testing.assert_allclose(pool.sum(axis=1), 1.0, atol=1e-12)
        assert pool[0, 4] == pytest.approx(0.45)
        np.testing.assert_allclose(pool[0, :4], (1.0 - 0.45) / 4.0)
        np.testing.assert_allclose(_pool_matrix(1, 1, 0.7), [[1.0]])


class TestVocabulary:
    def test_tokens_are_unique_and_lookup_roundtrips(self, world):
        vocab = world.vocab
        assert len(set(vocab.tokens)) == len(vocab.tokens) == world.config.vocab_size
        for token in vocab.tokens[:8]:
            assert vocab.tokens[vocab.lookup(token)] == token

    def test_unknown_token_raises(self, world):
        with pytest.raises(ValueError):
            world.vocab.lookup("definitely-not-a-token")

    def test_tokenize_pads_short_templates(self, world):
        ctx, cls_row = tokenize_prompt_text(
            world.vocab, DEFAULT_TEMPLATE, world.vocab.class_names[0], world.config.context_len
        )
        assert ctx.shape == (world.config.context_len, world.config.embed_dim)
        pad_row = world.vocab.embedding[world.vocab.pad_id]
        parts = DEFAULT_TEMPLATE.split()
        n_pad = world.config.context_len - (len(parts) - 1)
        for i in range(n_pad):
            np.testing.assert_array_equal(ctx[i], pad_row)
        np.testing.assert_array_equal(
            cls_row, world.vocab.embedding[world.vocab.lookup(world.vocab.class_names[0])]
        )

    def test_tokenize_rejects_bad_templates(self, world):
        with pytest.raises(ValueError):
            tokenize_prompt_text(world.vocab, "no placeholder here", "a", 4)
        with pytest.raises(ValueError):
            tokenize_prompt_text(world.vocab, "a b c d e {}", "a", 4)

    def test_random_context_is_seeded(self):
        a = random_context(4, 16, 9)
        b = random_context(4, 16, 9)
        c = random_context(4, 16, 10)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)


class TestPersistence:
    def test_world_roundtrip_is_exact(self, world, tmp_path):
        path = tmp_path / "world.npz"
        save_world(path, world)
        loaded = load_world(path)
        assert world_checksum(loaded) == world_checksum(world)
        assert loaded.vocab.tokens == world.vocab.tokens
        rng = np.random.default_rng(26)
        seq = rng.normal(size=(world.config.context_len + 1, world.config.embed_dim))
        np.testing.assert_array_equal(
            encode_text(loaded.encoder, seq), encode_text(world.encoder, seq)
        )

    def test_truncated_file_is_reported_corrupt(self, world, tmp_path):
        path = tmp_path / "world.npz"
        save_world(path, world)
        path.write_bytes(path.read_bytes()[:120])
        with pytest.raises(ContainerFormatError):
            load_world(path)

    def test_garbage_file_is_reported_corrupt(self, tmp_path):
        path = tmp_path / "junk.npz"
        path.write_text("not an archive")
        with pytest.raises(ContainerFormatError):
            load_world(path)

    def test_wrong_container_kind_is_rejected(self, tmp_path):
        path = tmp_path / "other.npz"
        save_arrays(path, {"a": np.ones(2)}, {"kind": "something_else"})
        with pytest.raises(ContainerFormatError):
            load_world(path)

    def test_version_mismatch_is_distinct(self, world, tmp_path, monkeypatch):
        from promptvar import containers

        path = tmp_path / "future.npz"
        monkeypatch.setattr(containers, "FORMAT_VERSION", 99)
        save_world(path, world)
        monkeypatch.undo()
        with pytest.raises(ContainerVersionError):
            load_world(path)
