import unittest

import numpy as np
import torch

from apps.foveation.encoder import EncoderConfig
from apps.foveation.gaze import GazePredictor
from apps.foveation.policy import FlowPolicy, PolicyConfig
from apps.foveation.toytasks import (
    MIXTURE_COVS,
    MIXTURE_MEANS,
    MixtureDataset,
    PolicyVariant,
    ReachConfig,
    ReachDataset,
    open_loop_gaze_error,
    reach_episodes,
    run_closed_loop,
    sample_reach_starts,
    variant_policy_config,
)

SHORT = ReachConfig(episode_length=6)
BASE = PolicyConfig(chunk_size=4, dim=32, depth=1, heads=4, n_img_tokens=4)


class MixtureDatasetTests(unittest.TestCase):
    def test_batch_layout(self):
        batch = MixtureDataset().sample_batch(np.random.default_rng(0), 8)
        self.assertEqual(tuple(batch.actions.shape), (8, 1, 2))
        self.assertEqual(tuple(batch.observation.proprio.shape), (8, 2))
        self.assertTrue(torch.equal(batch.observation.proprio.sum(dim=1), torch.ones(8)))

    def test_samples_follow_each_class(self):
        dataset = MixtureDataset()
        rng = np.random.default_rng(0)
        for label in range(dataset.n_classes):
            with self.subTest(label=label):
                samples = dataset.sample(rng, np.full(20000, label))
                np.testing.assert_allclose(samples.mean(axis=0), MIXTURE_MEANS[label], atol=0.01)
                np.testing.assert_allclose(np.cov(samples, rowvar=False), MIXTURE_COVS[label], atol=0.01)


class ReachEpisodeTests(unittest.TestCase):
    def test_scripted_episodes_approach_the_target(self):
        for episode in reach_episodes(8, seed=0):
            start = np.linalg.norm(episode.positions[0] - episode.target)
            end = np.linalg.norm(episode.positions[-1] - episode.target)
            self.assertLess(end, start)
            self.assertEqual(len(episode), 40)
            self.assertTrue(np.all(np.linalg.norm(episode.actions, axis=1) <= 0.05 + 1e-12))

    def test_starts_keep_their_distance(self):
        for start, target in sample_reach_starts(np.random.default_rng(1), 20):
            self.assertGreaterEqual(np.linalg.norm(target - start), 0.25)


class ReachDatasetTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.episodes = reach_episodes(3, seed=0, config=SHORT)

    def _batch(self, variant: str):
        dataset = ReachDataset(self.episodes, variant, config=SHORT)
        return dataset.sample_batch(np.random.default_rng(0), 3)

    def test_gaze_as_action_batch(self):
        batch = self._batch("fov-act")
        self.assertEqual(tuple(batch.actions.shape), (3, 16, 4))
        self.assertEqual(tuple(batch.observation.proprio.shape), (3, 4))
        self.assertEqual(tuple(batch.observation.pixels.shape), (3, 20, 768))

    def test_fine_batch(self):
        batch = self._batch("fine")
        self.assertEqual(tuple(batch.actions.shape), (3, 16, 2))
        self.assertEqual(tuple(batch.observation.proprio.shape), (3, 2))
        self.assertEqual(tuple(batch.observation.pixels.shape), (3, 324, 768))

    def test_coarse_batch(self):
        self.assertEqual(tuple(self._batch("coarse").observation.pixels.shape), (3, 20, 12288))

    def test_gaze_training_set(self):
        images, gazes = ReachDataset(self.episodes, "fov-unet", config=SHORT).gaze_training_set()
        self.assertEqual(images.shape, (18, 72, 72, 3))
        self.assertEqual(gazes.shape, (18, 2))

    def test_empty_dataset_rejected(self):
        with self.assertRaises(ValueError):
            ReachDataset([], "fine")


class VariantTests(unittest.TestCase):
    def test_variant_dimensions(self):
        expected = {"fine": (2, 2, 768), "coarse": (2, 2, 12288), "fov-act": (4, 4, 768), "fov-unet": (2, 4, 768)}
        for name, (action_dim, proprio_dim, embed_input) in expected.items():
            with self.subTest(variant=name):
                policy, encoder = variant_policy_config(name, BASE)
                self.assertEqual(policy.action_dim, action_dim)
                self.assertEqual(policy.proprio_dim, proprio_dim)
                self.assertEqual(encoder.embed_input, embed_input)
                self.assertEqual(encoder.n_queries, BASE.n_img_tokens)

    def test_variant_encoder_keeps_the_configured_vit(self):
        configured = EncoderConfig.desk("foveated", depth=4, dim=48, heads=4, mlp_ratio=2.0, qformer_depth=3, n_queries=16)
        for name, tokens in (("fine", 324), ("coarse", 20), ("fov-act", 20)):
            with self.subTest(variant=name):
                _, encoder = variant_policy_config(name, BASE, configured)
                self.assertEqual((encoder.depth, encoder.dim, encoder.mlp_ratio, encoder.qformer_depth), (4, 48, 2.0, 3))
                self.assertEqual(encoder.n_slots, tokens)
                self.assertEqual(encoder.n_queries, BASE.n_img_tokens)

    def test_unknown_variant(self):
        with self.assertRaises(ValueError):
            PolicyVariant.parse("fov-oracle")

    def test_closed_loop_runs_for_every_variant(self):
        start, target = np.array([0.3, 0.3]), np.array([0.7, 0.6])
        for variant in PolicyVariant:
            with self.subTest(variant=variant.value):
                torch.manual_seed(0)
                policy = FlowPolicy(*variant_policy_config(variant, BASE))
                predictor = GazePredictor() if variant is PolicyVariant.FOV_UNET else None
                result = run_closed_loop(policy, variant, start, target, SHORT, predictor, seed=0)
                self.assertTrue(np.isfinite(result.final_distance))
                self.assertEqual(result.steps, 6)
                if variant.gaze_in_proprio:
                    self.assertTrue(np.isfinite(result.gaze_error))
                else:
                    self.assertIsNone(result.gaze_error)

    def test_two_stage_needs_a_predictor(self):
        policy = FlowPolicy(*variant_policy_config("fov-unet", BASE))
        with self.assertRaises(ValueError):
            run_closed_loop(policy, "fov-unet", np.array([0.3, 0.3]), np.array([0.7, 0.6]), SHORT)

    def test_open_loop_gaze_error(self):
        dataset = ReachDataset(reach_episodes(2, seed=0, config=SHORT), "fov-act", chunk_size=4, config=SHORT)
        policy = FlowPolicy(*variant_policy_config("fov-act", BASE)).eval()
        self.assertTrue(np.isfinite(open_loop_gaze_error(policy, dataset, 3)))
        with self.assertRaises(ValueError):
            open_loop_gaze_error(policy, ReachDataset(dataset.episodes, "fine", config=SHORT), 3)


if __name__ == "__main__":
    unittest.main()
