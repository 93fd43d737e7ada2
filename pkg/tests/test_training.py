import hashlib

import numpy as np
import pytest

from protopop import data as dm
from protopop import fusion as fu
from protopop import prompts as pr
from protopop import prototypes as pt
from protopop import training as tr
from protopop.encoders import SyntheticEncoderProvider


@pytest.fixture(scope="module")
def small_world():
    return dm.build_world(dm.SyntheticConfig(classes=4, posts_per_class=40, dim=16, seed=3))


@pytest.fixture(scope="module")
def setup(small_world):
    world = small_world
    provider = SyntheticEncoderProvider(world)
    protos = pt.build_prototypes(world.dataset, provider,
                                 pt.SamplingPlan(shots=24, temporal_bins=4), 0)
    names = [e.name for e in world.dataset.classes.entries]
    return world, provider, protos, names


def _config(**kw):
    defaults = dict(epochs=2, batch_size=32, fusion_dim=16, heads=2, prompt_len=4, seed=0)
    defaults.update(kw)
    return tr.TrainConfig(**defaults)


class TestTrainAlignment:
    def test_zero_lr_keeps_parameters(self, setup):
        world, provider, protos, names = setup
        recs = world.dataset.records[:64]
        model = tr.init_model(provider, names, protos, _config(lr=0.0, weight_decay=0.0))
        before = [p.data.copy() for p in model.parameters()]
        model, hist = tr.train_alignment(recs, provider, protos, model.config, model=model)
        for p, b in zip(model.parameters(), before):
            assert np.array_equal(p.data, b)
        # with frozen parameters every epoch sees the same loss surface
        means = hist["epoch_means"]
        assert max(means) - min(means) < 1e-12

    def test_epoch_means_non_increasing(self, setup):
        world, provider, protos, names = setup
        recs = world.dataset.records
        _, hist = tr.train_alignment(recs, provider, protos, _config(epochs=4),
                                     class_names=names)
        means = hist["epoch_means"]
        assert all(means[i + 1] <= means[i] + 1e-9 for i in range(len(means) - 1))

    def test_single_sample_overfits(self, setup):
        world, provider, protos, names = setup
        rec = world.dataset.records[0]
        cfg = _config(lr=0.05, epochs=200, batch_size=1, weight_decay=0.0)
        _, hist = tr.train_alignment([rec], provider, protos, cfg, class_names=names)
        assert hist["batches"][-1]["loss"] < 0.1 * hist["batches"][0]["loss"]

    def test_empty_dataset(self, setup):
        _, provider, protos, names = setup
        with pytest.raises(dm.DataError):
            tr.train_alignment([], provider, protos, _config(), class_names=names)

    def test_prototypes_and_encoder_never_mutated(self, setup):
        world, provider, protos, names = setup

        def digest():
            h = hashlib.sha256()
            h.update(protos.visual.tobytes())
            h.update(protos.textual.tobytes())
            for rec in world.dataset.records[:20]:
                h.update(provider.encode_image(rec.post_id).tobytes())
            return h.hexdigest()

        before = digest()
        tr.train_alignment(world.dataset.records[:96], provider, protos,
                           _config(lr=0.01), class_names=names)
        assert digest() == before

    def test_reproducible_checkpoints(self, setup, tmp_path):
        world, provider, protos, names = setup
        recs = world.dataset.records[:96]
        for run in ("a", "b"):
            model, _ = tr.train_alignment(recs, provider, protos, _config(lr=0.01),
                                          class_names=names)
            tr.save_model(tmp_path / f"{run}.ckpt", model)
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


class TestPerSampleLosses:
    def test_evaluation_is_stable_and_pure(self, setup):
        world, provider, protos, names = setup
        recs = world.dataset.records[:32]
        model = tr.init_model(provider, names, protos, _config())
        a = tr.per_sample_losses(model, recs, provider)
        b = tr.per_sample_losses(model, recs, provider)
        assert a == b

    def test_matches_independent_recomputation(self, setup):
        world, provider, protos, names = setup
        recs = world.dataset.records[:8]
        cfg = _config()
        model = tr.init_model(provider, names, protos, cfg)
        losses = tr.per_sample_losses(model, recs, provider)
        embeds = pr.class_embeddings(model.bank, provider)
        for rec in recs:
            h, H = provider.encode_text(rec.post_id, cfg.source)
            p = pr.global_score(h, embeds)
            pl = pr.local_score(H, embeds, tau_s=cfg.tau_s)
            lg, lo = pr.prompt_losses(p, pl, rec.class_index, tau_g=cfg.tau_g)
            triple = fu.fuse(provider.encode_image(rec.post_id),
                             protos.visual, protos.textual, model.fusion)
            lc = fu.cross_loss(triple, rec.class_index, model.fusion)
            assert abs(losses[rec.post_id] - (lg.item() + lo.item() + lc.item())) < 1e-10

    def test_aligned_sample_scores_lower(self, setup):
        world, provider, protos, names = setup
        model = tr.init_model(provider, names, protos, _config())
        embeds = pr.class_embeddings(model.bank, provider)
        g3 = embeds.global_embeds.data[3]
        matched = pr.prompt_losses(pr.global_score(g3, embeds),
                                   pr.global_score(g3, embeds), 3, 0.07)[0].item()
        ortho = np.zeros(16)
        ortho[np.argmin(np.abs(g3))] = 1.0
        off = pr.prompt_losses(pr.global_score(ortho, embeds),
                               pr.global_score(ortho, embeds), 3, 0.07)[0].item()
        assert matched < off


class TestSelectSamples:
    def test_floor_rule(self):
        losses = {"a": 0.1, "b": 0.5, "c": 0.2, "d": 0.9}
        assert tr.select_samples(losses, 0.77) == ["a", "b", "c"]

    def test_identity_at_one(self):
        losses = {"a": 0.3, "b": 0.1}
        assert tr.select_samples(losses, 1.0) == ["a", "b"]

    def test_tie_broken_lexicographically(self):
        losses = {"z": 1.0, "a": 1.0, "m": 1.0}
        assert tr.select_samples(losses, 0.5) == ["a"]

    def test_minimum_one(self):
        assert tr.select_samples({"only": 2.0}, 0.01) == ["only"]

    def test_nesting(self):
        rng = np.random.default_rng(0)
        losses = {f"p{i}": float(rng.random()) for i in range(50)}
        prev = set()
        for rho in (0.1, 0.3, 0.5, 0.77, 1.0):
            cur = set(tr.select_samples(losses, rho))
            assert prev <= cur
            prev = cur

    def test_empty_table(self):
        with pytest.raises(dm.DataError):
            tr.select_samples({}, 0.5)


class TestExtractFeatures:
    def test_width_arithmetic(self):
        assert tr.feature_width(32, 8, 64) == 168

    def test_blocks_and_width(self, setup):
        world, provider, protos, names = setup
        cfg = _config()
        model = tr.init_model(provider, names, protos, cfg)
        splits = dm.split_ids(world.dataset, seed=0)
        stats = dm.compute_user_stats(world.dataset, splits["train"])
        recs = world.dataset.records[:12]
        table = tr.extract_features(model, recs, provider, stats)
        assert table.width == tr.feature_width(16, 4, 16)
        assert list(table.blocks) == list(tr.FEATURE_BLOCKS)

    def test_training_changes_sims_not_raw_blocks(self, setup):
        world, provider, protos, names = setup
        splits = dm.split_ids(world.dataset, seed=0)
        stats = dm.compute_user_stats(world.dataset, splits["train"])
        recs = world.dataset.records[:12]
        cfg = _config(lr=0.05, epochs=3)
        untrained = tr.init_model(provider, names, protos, cfg)
        before = tr.extract_features(untrained, recs, provider, stats)
        trained, _ = tr.train_alignment(world.dataset.records, provider, protos, cfg,
                                        class_names=names)
        after = tr.extract_features(trained, recs, provider, stats)
        frozen = list(tr.FROZEN_BLOCKS)
        assert np.array_equal(before.subset([r.post_id for r in recs], frozen),
                              after.subset([r.post_id for r in recs], frozen))
        sims = ["global_sims", "local_sims"]
        assert not np.array_equal(before.subset([r.post_id for r in recs], sims),
                                  after.subset([r.post_id for r in recs], sims))

    def test_duplicate_posts_identical_rows(self, setup):
        world, provider, protos, names = setup
        splits = dm.split_ids(world.dataset, seed=0)
        stats = dm.compute_user_stats(world.dataset, splits["train"])
        model = tr.init_model(provider, names, protos, _config())
        rec = world.dataset.records[0]
        table = tr.extract_features(model, [rec, rec], provider, stats)
        assert np.array_equal(table.matrix[0], table.matrix[1])

    def test_missing_stats_error(self, setup):
        world, provider, protos, names = setup
        model = tr.init_model(provider, names, protos, _config())
        with pytest.raises(dm.DataError, match="stats"):
            tr.extract_features(model, world.dataset.records[:2], provider, {})

    def test_feature_file_round_trip(self, setup, tmp_path):
        world, provider, protos, names = setup
        splits = dm.split_ids(world.dataset, seed=0)
        stats = dm.compute_user_stats(world.dataset, splits["train"])
        model = tr.init_model(provider, names, protos, _config())
        table = tr.extract_features(model, world.dataset.records[:10], provider, stats)
        tr.save_features(tmp_path, table)
        loaded = tr.load_features(tmp_path)
        assert loaded.ids == table.ids
        assert loaded.blocks == table.blocks
        assert np.array_equal(loaded.matrix,
                              table.matrix.astype(np.float32).astype(np.float64))


class TestCheckpoint:
    def test_round_trip(self, setup, tmp_path):
        world, provider, protos, names = setup
        cfg = _config(learnable_temps=True)
        model, _ = tr.train_alignment(world.dataset.records[:64], provider, protos, cfg,
                                      class_names=names)
        tr.save_model(tmp_path / "m.ckpt", model)
        loaded = tr.load_model(tmp_path / "m.ckpt")
        assert loaded.config == cfg
        assert np.array_equal(loaded.bank.theta_global.data, model.bank.theta_global.data)
        assert np.array_equal(loaded.fusion.attn.wo.data, model.fusion.attn.wo.data)
        assert np.array_equal(loaded.prototypes.visual, model.prototypes.visual)
        assert loaded.fusion.log_tau_v.requires_grad
        # loaded model evaluates identically
        recs = world.dataset.records[:8]
        a = tr.per_sample_losses(model, recs, provider)
        b = tr.per_sample_losses(loaded, recs, provider)
        for pid in a:
            assert abs(a[pid] - b[pid]) < 1e-12

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.ckpt").write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(dm.DataError, match="magic"):
            tr.load_model(tmp_path / "bad.ckpt")
