import unittest
from unittest.mock import patch
import sys
import os
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

# Add parent directory to path to import the kit modules
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))
from pipeline import (
    DEFAULT_STAGES,
    MOTIONS,
    PALETTE,
    ClipDataset,
    CodecRunConfig,
    KitConfig,
    LatentCache,
    StageConfig,
    SynthConfig,
    ValidationConfig,
    conditioning_ablation,
    generate,
    heldout_set,
    load_checkpoint,
    load_config,
    load_dataset,
    load_model,
    make_synthetic,
    masked_fraction,
    render_shape_clip,
    save_dataset,
    train,
    train_codec_stack,
    validate,
)
from bucketizer import DEFAULT_BUCKETS, Bucket
from config import SEED_ENV_VAR
from dataprep import camera_motion, discover_videos, optical_flow, run_pipeline
from errors import ArgumentError, ConfigError, GeometryError, PreconditionError
from latent_codec import VideoCodec
from numerics import make_rng, save_vten
from stdit_model import STDiT, ModelConfig

SLOW = os.environ.get("OPEN_SORA_KIT_SLOW") == "1"
BUCKET = Bucket(16, 16, "1:1", 1.0, 2)


def small_model():
    return ModelConfig(hidden=16, depth=1, heads=2, text_dim=16, max_text_len=8, max_grid=4)


def small_config(stages=None, **overrides):
    values = dict(
        seed=0,
        model=small_model(),
        synth=SynthConfig(count=4, resolutions=(16,), aspects=("1:1",), frames=(17,)),
        stages=stages or [StageConfig(1, 3, 0.0, buckets=[BUCKET]), StageConfig(2, 3, 0.5, buckets=[BUCKET])],
        buckets=[BUCKET],
        validation=ValidationConfig(lengths={"image": 1, "2s": 8}, resolutions={"144p": 8, "240p": 16}, clips=1),
    )
    values.update(overrides)
    return KitConfig(**values)


def small_dataset(cfg, n=4):
    return make_synthetic(n, cfg.synth, cfg.seed)


class TestConfig(unittest.TestCase):
    def write(self, text):
        tmp = tempfile.TemporaryDirectory()
        self.addCleanup(tmp.cleanup)
        path = Path(tmp.name) / "run.toml"
        path.write_text(text)
        return path

    def test_defaults(self):
        with patch.dict(os.environ):
            os.environ.pop(SEED_ENV_VAR, None)
            cfg = load_config()
        self.assertEqual(cfg.seed, 0)
        self.assertEqual([s.stage for s in cfg.stages], [1, 2, 3])
        self.assertEqual(cfg.model, ModelConfig())

    def test_toml_sections(self):
        path = self.write(
            'seed = 3\n'
            '[model]\nhidden = 16\ndepth = 1\n'
            '[flow]\nsteps = 5\n'
            '[codec]\nspatial_steps = 10\nstage = 2\n'
            '[synth]\ncount = 3\n'
            '[stages.2]\nsteps = 4\nmask_prob = 0.5\nresolutions = ["240p"]\n'
            '[stages.1]\nsteps = 2\n'
            '[buckets]\nrows = [{resolution = 16, frames = 16, batch_size = 2}]\n'
            '[validation]\nresolutions = ["144p", "240p"]\nclips = 1\n'
        )
        with patch.dict(os.environ):
            os.environ.pop(SEED_ENV_VAR, None)
            cfg = load_config(path)
        self.assertEqual(cfg.seed, 3)
        self.assertEqual((cfg.model.hidden, cfg.model.depth, cfg.model.seed), (16, 1, 3))
        self.assertEqual(cfg.flow.steps, 5)
        self.assertEqual(cfg.codec.spatial_steps, 10)
        self.assertEqual((cfg.codec.codec.stage, cfg.codec.codec.seed), (2, 3))
        self.assertEqual(cfg.synth.count, 3)
        self.assertEqual([s.stage for s in cfg.stages], [1, 2])
        self.assertEqual(cfg.stages[1].resolutions, (16,))
        self.assertEqual(cfg.buckets, [Bucket(16, 16, batch_size=2)])
        self.assertEqual(cfg.validation.resolutions, {"144p": 8, "240p": 16})
        self.assertEqual(cfg.validation.seed, 3)

    def test_environment_seed_wins(self):
        path = self.write("seed = 3\n")
        with patch.dict(os.environ, {SEED_ENV_VAR: "7"}):
            cfg = load_config(path)
        self.assertEqual((cfg.seed, cfg.model.seed, cfg.codec.codec.seed), (7, 7, 7))

    def test_bad_configs(self):
        for text in ("[extra]\nx = 1\n", "[model]\nwidth = 3\n", "seed = \n", "[stages.1]\nsteps = 0\n",
                     "[model]\nhidden = 30\nheads = 4\n", "[buckets]\nsize = 3\n"):
            with self.subTest(text=text):
                with self.assertRaises(ConfigError):
                    load_config(self.write(text))
        with self.assertRaises(ConfigError):
            load_config("/nonexistent/run.toml")

    def test_stage_buckets(self):
        stage = StageConfig(2, 5, resolutions=(16,), frames=(16,))
        table = [Bucket(16, 16), Bucket(16, 1), Bucket(24, 16)]
        self.assertEqual(stage.resolve_buckets(table), [Bucket(16, 16)])
        with self.assertRaises(ConfigError):
            StageConfig(3, 5, resolutions=(48,)).resolve_buckets(table)
        self.assertEqual(StageConfig(1, 5, buckets=[BUCKET]).resolve_buckets(table), [BUCKET])
        with self.assertRaises(ConfigError):
            StageConfig(1, 5, mask_prob=1.5)


class TestSyntheticData(unittest.TestCase):
    def test_seeded_and_described(self):
        spec = SynthConfig(count=3, resolutions=(16, 24), frames=(9,))
        a = make_synthetic(3, spec, seed=5)
        b = make_synthetic(3, spec, seed=5)
        self.assertEqual(a.clip_ids, ["synth-0000", "synth-0001", "synth-0002"])
        for cid in a.clip_ids:
            np.testing.assert_array_equal(a.videos[cid], b.videos[cid])
            video = a.videos[cid]
            row = a.manifest.set_index("clip_id").loc[cid]
            self.assertEqual(video.shape, (row["frames"], row["height"], row["width"], 3))
            self.assertGreaterEqual(video.min(), 0.0)
            self.assertLessEqual(video.max(), 1.0)
            color, shape, motion = row["caption"].split(" ", 2)
            self.assertIn(color, PALETTE)
            self.assertEqual(row["camera_motion"], MOTIONS[motion][3])
        self.assertTrue(a.manifest.equals(b.manifest))
        with self.assertRaises(PreconditionError):
            make_synthetic(0)

    def test_planted_motion_matches_measured_camera(self):
        for motion in ("moving right", "moving left", "moving up", "moving down", "static"):
            with self.subTest(motion=motion):
                video = render_shape_clip(make_rng(0, motion), 32, 32, 6, "square", PALETTE["red"], motion, 2.0)
                label = camera_motion(optical_flow(video), translation_threshold=0.1)
                self.assertEqual(label, MOTIONS[motion][3])

    def test_save_and_load(self):
        cfg = small_config()
        dataset = small_dataset(cfg, 2)
        with tempfile.TemporaryDirectory() as tmp:
            save_dataset(dataset, Path(tmp) / "data")
            loaded = load_dataset(Path(tmp) / "data")
            with self.assertRaises(ArgumentError):
                load_dataset(Path(tmp) / "missing")
        self.assertEqual(loaded.clip_ids, dataset.clip_ids)
        for cid in dataset.clip_ids:
            np.testing.assert_array_equal(loaded.videos[cid], dataset.videos[cid])
            self.assertEqual(loaded.caption(cid), dataset.caption(cid))
            self.assertEqual(loaded.fps(cid), dataset.fps(cid))

    def test_load_prep_output_keeps_only_kept_clips(self):
        base = np.random.default_rng(0).random((16, 16))
        moving = np.stack([np.roll(base, 2 * k, axis=1) for k in range(6)])
        moving = np.repeat(moving[..., None], 3, axis=-1).astype(np.float32)
        still = np.repeat(moving[:1], 6, axis=0)
        with tempfile.TemporaryDirectory() as tmp:
            raw = Path(tmp) / "raw"
            save_vten(raw / "moving.vten", moving)
            save_vten(raw / "still.vten", still)
            run_pipeline(discover_videos(raw), out_dir=Path(tmp) / "prep")
            dataset = load_dataset(Path(tmp) / "prep")
        self.assertEqual(dataset.clip_ids, ["moving-00000"])
        np.testing.assert_array_equal(dataset.videos["moving-00000"], moving)
        self.assertEqual(len(dataset.metas()), 1)


class TestCodecAndCache(unittest.TestCase):
    def test_codec_stack_history(self):
        videos = [np.random.default_rng(i).random((9, 16, 16, 3)).astype(np.float32) for i in range(2)]
        run = CodecRunConfig(spatial_steps=2, stage_steps=(1, 2, 1), batch_size=1)
        codec, history = train_codec_stack(run, videos, seed=1)
        self.assertEqual(list(history.columns), ["phase", "step", "loss"])
        self.assertEqual(history["phase"].value_counts().to_dict(), {"spatial": 2, "stage2": 2, "stage1": 1, "stage3": 1})
        self.assertTrue(np.all(np.isfinite(history["loss"])))
        self.assertFalse(np.array_equal(codec.latent_std, np.ones(codec.config.latent_channels)))
        with self.assertRaises(ConfigError):
            CodecRunConfig(stage_steps=(1, 2))
        with self.assertRaises(PreconditionError):
            train_codec_stack(run, [])

    def test_latent_cache(self):
        cfg = small_config()
        dataset = small_dataset(cfg, 1)
        cache = LatentCache(VideoCodec(), dataset)
        cid = dataset.clip_ids[0]
        first = cache.get(cid, BUCKET)
        self.assertIs(cache.get(cid, BUCKET), first)
        self.assertEqual(first.shape, (5, 2, 2, 4))


class TestTraining(unittest.TestCase):
    def setUp(self):
        self.cfg = small_config()
        self.dataset = small_dataset(self.cfg)
        self.codec = VideoCodec()

    def test_loss_log_and_checkpoints(self):
        with tempfile.TemporaryDirectory() as tmp:
            result = train(self.cfg, self.codec, self.dataset, Path(tmp) / "run")
            self.assertTrue((Path(tmp) / "run" / "loss_log.csv").exists())
            self.assertEqual([p.name for p in result.checkpoints], ["stage1", "stage2"])
            model, optimizer_state, state = load_checkpoint(result.checkpoints[-1])
            self.assertEqual(state, {"stage": 2, "global_step": 6, "seed": 0})
            self.assertEqual(int(optimizer_state["t"][0]), 6)
            self.assertIsInstance(load_model(result.checkpoints[0]), STDiT)
            self.assertIsInstance(load_model(result.checkpoints[0] / "model"), STDiT)
            with self.assertRaises(ArgumentError):
                load_checkpoint(result.checkpoints[0] / "model")
        log = result.log
        self.assertEqual(list(log["global_step"]), list(range(6)))
        self.assertEqual(list(log["stage"]), [1, 1, 1, 2, 2, 2])
        self.assertTrue(np.all(np.isfinite(log["loss"])))
        self.assertIn("smoothed", log.columns)
        self.assertTrue((log["bucket"] == BUCKET.name).all())
        self.assertTrue((log["latent_frames"] == 5).all())

    def test_resume_matches_uninterrupted_run(self):
        with tempfile.TemporaryDirectory() as tmp:
            full = train(self.cfg, self.codec, self.dataset, Path(tmp) / "full")
            first = train(self.cfg, self.codec, self.dataset, Path(tmp) / "part", stages=self.cfg.stages[:1])
            resumed = train(self.cfg, self.codec, self.dataset, Path(tmp) / "resumed", resume=first.checkpoints[0])
        self.assertEqual(list(resumed.log["stage"]), [2, 2, 2])
        self.assertEqual(list(resumed.log["global_step"]), [3, 4, 5])
        np.testing.assert_array_equal(resumed.log["loss"].to_numpy(), full.log["loss"].to_numpy()[3:])
        full_state, resumed_state = full.model.state_dict(), resumed.model.state_dict()
        for name in full_state:
            np.testing.assert_array_equal(resumed_state[name], full_state[name])

    def test_masked_fraction_follows_stage(self):
        stages = [StageConfig(1, 2, 0.0, buckets=[BUCKET]), StageConfig(2, 2, 1.0, buckets=[BUCKET])]
        log = train(small_config(stages), self.codec, self.dataset).log
        self.assertEqual(masked_fraction(log, 1), 0.0)
        self.assertEqual(masked_fraction(log, 2), 1.0)
        self.assertEqual(masked_fraction(log), 0.5)

    def test_temporal_only_stage_freezes_the_rest(self):
        stages = [StageConfig(1, 2, 0.0, buckets=[BUCKET], temporal_only=True)]
        model = train(small_config(stages), self.codec, self.dataset).model
        initial = STDiT(small_model()).state_dict()
        after = model.state_dict()
        np.testing.assert_array_equal(after["pos_embed"], initial["pos_embed"])
        np.testing.assert_array_equal(after["blocks.0.spatial.qkv.weight"], initial["blocks.0.spatial.qkv.weight"])
        self.assertFalse(np.array_equal(after["blocks.0.temporal.proj.weight"], initial["blocks.0.temporal.proj.weight"]))

    def test_training_preconditions(self):
        with self.assertRaises(PreconditionError):
            train(self.cfg, self.codec, ClipDataset({}, pd.DataFrame()))
        with self.assertRaises(ConfigError):
            train(self.cfg, self.codec, self.dataset, stages=list(reversed(self.cfg.stages)))
        with self.assertRaises(ConfigError):
            train(self.cfg, self.codec, self.dataset, stages=[])
        tiny = [StageConfig(1, 1, buckets=[Bucket(16, 16, batch_size=8)])]
        with self.assertRaises(PreconditionError):
            train(self.cfg, self.codec, self.dataset, stages=tiny)


class TestValidation(unittest.TestCase):
    def setUp(self):
        self.cfg = small_config()
        self.model = STDiT(small_model())
        self.codec = VideoCodec()
        self.heldout = heldout_set(self.cfg)

    def test_heldout_set_fills_the_grid(self):
        self.assertEqual(len(self.heldout), 1)
        video = self.heldout.videos["validation-0000"]
        self.assertEqual(video.shape, (8, 16, 16, 3))

    def test_grid_is_seeded_and_complete(self):
        grid = ValidationConfig(lengths={"image": 1, "2s": 8, "8s": 32}, resolutions={"144p": 8, "240p": 16}, clips=1)
        a = validate(self.model, self.codec, self.heldout, grid)
        b = validate(self.model, self.codec, self.heldout, grid, max_workers=1)
        self.assertEqual(list(a.cells.columns), ["length", "frames", "resolution", "pixels", "clips", "loss"])
        self.assertEqual(len(a.cells), 6)
        pd.testing.assert_frame_equal(a.cells, b.cells)
        absent = a.cells[a.cells["length"] == "8s"]
        self.assertTrue(absent["loss"].isna().all())
        self.assertTrue((absent["clips"] == 0).all())
        present = a.cells[a.cells["length"] != "8s"]
        self.assertTrue(np.all(np.isfinite(present["loss"])))
        self.assertAlmostEqual(a.total, float(present["loss"].sum()))
        self.assertEqual(a.table().shape, (3, 2))
        with tempfile.TemporaryDirectory() as tmp:
            path = a.to_csv(Path(tmp) / "out" / "validation.csv")
            self.assertEqual(len(pd.read_csv(path)), 6)


class TestGeneration(unittest.TestCase):
    def setUp(self):
        self.model = STDiT(small_model())
        self.codec = VideoCodec()
        self.image = np.random.default_rng(0).random((16, 16, 3)).astype(np.float32)

    def test_conditioning_frames_survive_generation(self):
        result = generate(self.model, self.codec, "red square moving right", 9, 16, 16, steps=3,
                          condition_video=self.image, condition="first:1")
        self.assertEqual(result.video.shape, (9, 16, 16, 3))
        self.assertEqual(result.latent.data.shape, (3, 2, 2, 4))
        np.testing.assert_array_equal(result.latent.data[0], self.codec.encode(self.image[None]).data[0])
        self.assertEqual(list(result.mask.conditioning), [True, False, False])

    def test_last_frame_conditioning_uses_the_first_input_latents(self):
        clip = np.random.default_rng(1).random((9, 16, 16, 3)).astype(np.float32)
        result = generate(self.model, self.codec, "a clip", 9, 16, 16, steps=2, condition_video=clip, condition="last:1")
        np.testing.assert_array_equal(result.latent.data[2], self.codec.encode(clip).data[0])
        image = generate(self.model, self.codec, "a clip", 9, 16, 16, steps=2, condition_video=self.image, condition="last:1")
        np.testing.assert_array_equal(image.latent.data[-1], self.codec.encode(self.image[None]).data[0])
        self.assertEqual(image.video.shape[0], 9)

    def test_generation_is_seeded(self):
        a = generate(self.model, self.codec, "blue disk", 5, 16, 8, steps=2, seed=4)
        b = generate(self.model, self.codec, "blue disk", 5, 16, 8, steps=2, seed=4)
        c = generate(self.model, self.codec, "blue disk", 5, 16, 8, steps=2, seed=5)
        np.testing.assert_array_equal(a.video, b.video)
        self.assertFalse(np.array_equal(a.video, c.video))
        guided = generate(self.model, self.codec, "blue disk", 5, 16, 8, steps=2, seed=4, guidance_scale=3.0)
        self.assertFalse(np.array_equal(a.video, guided.video))

    def test_scored_prompt(self):
        result = generate(self.model, self.codec, "red square", 1, 8, 8, steps=1, aesthetic=5.5, motion=2.0, camera="pan left")
        self.assertEqual(result.caption, "red square aesthetic score: 5.5, motion score: 2, camera motion: pan left")
        self.assertEqual(result.video.shape, (1, 8, 8, 3))

    def test_generation_errors(self):
        with self.assertRaises(GeometryError):
            generate(self.model, self.codec, "x", 5, 12, 16, steps=1)
        with self.assertRaises(ArgumentError):
            generate(self.model, self.codec, "x", 5, 16, 16, steps=1, condition="first:1")
        with self.assertRaises(ArgumentError):
            generate(self.model, self.codec, "x", 5, 16, 16, steps=1, condition_video=self.image, condition="first:2")
        with self.assertRaises(GeometryError):
            generate(self.model, self.codec, "x", 5, 16, 16, steps=1, condition_video=self.image[:8], condition="first:1")


class TestAblation(unittest.TestCase):
    def test_one_row_per_probability(self):
        cfg = small_config()
        dataset = small_dataset(cfg)
        table = conditioning_ablation(cfg, VideoCodec(), dataset, dataset, mask_probs=(0.0, 1.0), steps=2)
        self.assertEqual(list(table["mask_prob"]), [0.0, 1.0])
        self.assertTrue(np.all(np.isfinite(table["conditioned_loss"])))

    @unittest.skipUnless(SLOW, "set OPEN_SORA_KIT_SLOW=1 to run")
    def test_end_to_end_loss_drops(self):
        cfg = small_config(
            stages=list(DEFAULT_STAGES),
            buckets=list(DEFAULT_BUCKETS),
            synth=SynthConfig(count=12),
            validation=ValidationConfig(lengths={"image": 1, "2s": 8, "4s": 16},
                                        resolutions={"144p": 8, "240p": 16, "360p": 24}, clips=2),
        )
        dataset = make_synthetic(cfg.synth.count, cfg.synth, cfg.seed)
        codec, _ = train_codec_stack(CodecRunConfig(spatial_steps=100, stage_steps=(50, 50, 50)),
                                     [dataset.videos[c] for c in dataset.clip_ids])
        heldout = heldout_set(cfg)
        with tempfile.TemporaryDirectory() as tmp:
            result = train(cfg, codec, dataset, Path(tmp) / "run")
            self.assertEqual([p.name for p in result.checkpoints], ["stage1", "stage2", "stage3"])
            grids = [validate(load_model(p), codec, heldout, cfg.validation, cfg.flow) for p in result.checkpoints]
        log = result.log
        self.assertEqual(sorted(set(log["stage"])), [1, 2, 3])
        self.assertLess(log["loss"].iloc[-20:].mean(), log["loss"].iloc[:20].mean())

        baseline = validate(STDiT(cfg.model), codec, heldout, cfg.validation, cfg.flow)
        final = grids[-1].cells.set_index(["length", "resolution"])["loss"]
        reference = baseline.cells.set_index(["length", "resolution"])["loss"]
        populated = final.dropna()
        self.assertGreater(len(populated), 0)
        for cell, loss in populated.items():
            self.assertLess(loss, reference[cell], msg=f"cell {cell}")
        totals = [grid.total for grid in grids]
        for earlier, later in zip(totals, totals[1:]):
            self.assertLess(later, earlier)


if __name__ == '__main__':
    unittest.main()
