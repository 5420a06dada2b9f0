import tempfile
import unittest
from pathlib import Path

import numpy as np
import torch
from sklearn.model_selection import train_test_split

from apps.foveation.encoder import EncoderConfig
from apps.foveation.fovea import GazePoint, translate
from apps.foveation.gaze import (
    GAZE_CSV_COLUMNS,
    GazeHistory,
    GazePredictor,
    GazePredictorConfig,
    downscale_image,
    export_heatmap_png,
    fovea_contains,
    foveated_observation,
    gaze_as_action_step,
    gaze_errors,
    gaze_frame,
    heatmap_keypoint,
    merge_binocular,
    spatial_softmax,
    train_gaze_predictor,
    two_stage_step,
)
from apps.foveation.policy import FlowPolicy, PolicyConfig, euler_sample, train_policy
from apps.foveation.toytasks import (
    ReachDataset,
    blob_dataset,
    open_loop_gaze_error,
    reach_episodes,
    render_blob,
    variant_policy_config,
)


class SpatialSoftmaxTests(unittest.TestCase):
    def test_near_delta_picks_the_cell_center(self):
        heatmap = np.zeros((18, 18))
        heatmap[3, 7] = 50.0
        point = heatmap_keypoint(heatmap)
        self.assertAlmostEqual(point.x, 7.5 / 18, delta=1e-6)
        self.assertAlmostEqual(point.y, 3.5 / 18, delta=1e-6)

    def test_uniform_is_the_center(self):
        point = heatmap_keypoint(np.full((18, 18), 0.7))
        self.assertAlmostEqual(point.x, 0.5, places=12)
        self.assertAlmostEqual(point.y, 0.5, places=12)

    def test_two_equal_peaks_average(self):
        # cell centers (0.25, 0.5) and (0.75, 0.5) on a 9 x 10 grid
        heatmap = np.zeros((9, 10))
        heatmap[4, 2] = heatmap[4, 7] = 40.0
        point = heatmap_keypoint(heatmap)
        self.assertAlmostEqual(point.x, 0.5, delta=1e-4)
        self.assertAlmostEqual(point.y, 0.5, delta=1e-4)

    def test_temperature_limits(self):
        heatmap = np.random.default_rng(0).normal(size=(18, 18))
        heatmap[12, 4] = heatmap.max() + 1.0
        hot = heatmap_keypoint(heatmap, temperature=1e6)
        self.assertAlmostEqual(hot.x, 0.5, delta=1e-4)
        self.assertAlmostEqual(hot.y, 0.5, delta=1e-4)
        cold = heatmap_keypoint(heatmap, temperature=1e-3)
        self.assertAlmostEqual(cold.x, 4.5 / 18, delta=1e-6)
        self.assertAlmostEqual(cold.y, 12.5 / 18, delta=1e-6)

    def test_batched_output_shape(self):
        self.assertEqual(tuple(spatial_softmax(torch.zeros(4, 18, 18)).shape), (4, 2))

    def test_rejects_non_positive_temperature(self):
        with self.assertRaises(ValueError):
            spatial_softmax(torch.zeros(18, 18), temperature=0.0)


class GazeHelperTests(unittest.TestCase):
    def test_fovea_contains(self):
        gaze = GazePoint(0.3, 0.6)
        self.assertTrue(fovea_contains(gaze, gaze))
        self.assertFalse(fovea_contains(gaze, GazePoint(0.8, 0.1)))

    def test_merge_binocular_averages(self):
        merged = merge_binocular(GazePoint(0.2, 0.4), GazePoint(0.4, 0.8))
        self.assertAlmostEqual(merged.x, 0.3)
        self.assertAlmostEqual(merged.y, 0.6)

    def test_gaze_frame_columns(self):
        frame = gaze_frame([0, 1], np.array([[0.1, 0.2], [0.3, 0.4]]), "unet")
        self.assertEqual(list(frame.columns), GAZE_CSV_COLUMNS)
        self.assertEqual(frame["source"].tolist(), ["unet", "unet"])
        with self.assertRaises(ValueError):
            gaze_frame([0], np.zeros((1, 2)), "oracle")

    def test_config_validation(self):
        with self.assertRaises(ValueError):
            GazePredictorConfig(grid=4)
        with self.assertRaises(ValueError):
            GazePredictorConfig(temperature=-1.0)

    def test_history_starts_at_center(self):
        history = GazeHistory()
        self.assertEqual(history.last, GazePoint.center())
        history.update(GazePoint(0.1, 0.2))
        self.assertTrue(history.initialized)
        history.reset()
        self.assertEqual(history.last, GazePoint.center())
        self.assertFalse(history.initialized)


class BlobPredictorTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.config = GazePredictorConfig(log_every=0)
        images, gazes = blob_dataset(640, seed=0, side=cls.config.input_side)
        cls.train_x, cls.test_x, cls.train_y, cls.test_y = train_test_split(images, gazes, test_size=128, random_state=0)
        cls.result = train_gaze_predictor(cls.train_x, cls.train_y, cls.config)
        cls.predictor = cls.result.predictor

    def test_heldout_error(self):
        self.assertLess(float(gaze_errors(self.predictor, self.test_x, self.test_y).mean()), 0.05)

    def test_blob_lands_in_the_fovea(self):
        hits = [
            fovea_contains(self.predictor.predict_point(image), GazePoint.from_array(label))
            for image, label in zip(self.test_x, self.test_y)
        ]
        self.assertGreaterEqual(np.mean(hits), 0.9)

    def test_one_cell_translation_moves_the_keypoint_one_cell(self):
        side = self.config.input_side
        cell = side // self.config.grid
        image = render_blob(np.array([0.5, 0.5]), side, side / 36.0, np.random.default_rng(1))
        shifted = translate(image, cell, 0)
        # a cold softmax reads the peak, which sits away from the zero-filled border
        before = heatmap_keypoint(self.predictor.heatmap(image), temperature=0.01)
        after = heatmap_keypoint(self.predictor.heatmap(shifted), temperature=0.01)
        width = 1.0 / self.config.grid
        self.assertAlmostEqual(after.x - before.x, width, delta=0.1 * width)
        self.assertAlmostEqual(after.y - before.y, 0.0, delta=0.1 * width)

    def test_heatmap_png(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = export_heatmap_png(self.predictor, self.test_x[0], Path(tmp) / "heatmap.png")
            self.assertTrue(path.exists())


class ConstantLabelTests(unittest.TestCase):
    def test_converges_to_the_constant(self):
        config = GazePredictorConfig(steps=800, lr=3e-3, batch_size=16, log_every=0)
        side = config.input_side
        images = (0.4 + 0.05 * np.random.default_rng(0).random((16, side, side, 3))).astype(np.float32)
        labels = np.tile(np.array([0.3, 0.7], dtype=np.float32), (16, 1))
        predictor = train_gaze_predictor(images, labels, config).predictor
        with torch.no_grad():
            predicted = predictor.predict(torch.from_numpy(images.transpose(0, 3, 1, 2).copy())).numpy()
        self.assertLess(float(np.abs(predicted - labels).max()), 0.02)


class ControlStepTests(unittest.TestCase):
    def setUp(self):
        torch.manual_seed(0)
        self.image = np.random.default_rng(0).random((288, 288, 3)).astype(np.float32)
        self.encoder = EncoderConfig.desk("foveated")

    def test_foveated_observation_appends_gaze_to_proprio(self):
        observation = foveated_observation(self.image, GazePoint(0.2, 0.9), np.array([0.5, 0.5]))
        self.assertEqual(tuple(observation.proprio.shape), (1, 4))
        np.testing.assert_allclose(observation.proprio[0, 2:].numpy(), [0.2, 0.9])
        self.assertEqual(tuple(observation.pixels.shape), (1, 20, 768))

    def test_two_stage_step(self):
        policy = FlowPolicy(PolicyConfig(proprio_dim=4), self.encoder).eval()
        step = two_stage_step(self.image, GazePredictor(), policy, np.array([0.5, 0.5]), seed=0)
        self.assertEqual(step.actions.shape, (16, 2))
        self.assertEqual(step.gaze_trajectory.shape, (16, 2))

    def test_two_stage_step_foveates_at_the_predicted_gaze(self):
        torch.manual_seed(1)
        predictor = GazePredictor().eval()
        policy = FlowPolicy(PolicyConfig(proprio_dim=4), self.encoder).eval()
        with torch.no_grad():
            for param in policy.parameters():
                if not param.any():
                    param.copy_(0.1 * torch.randn_like(param))
        proprio = np.array([0.5, 0.5])
        small = downscale_image(self.image, predictor.config.downscale)
        with torch.no_grad():
            expected = predictor.predict(torch.from_numpy(small.transpose(2, 0, 1)[None].copy()))[0].numpy()

        step = two_stage_step(self.image, predictor, policy, proprio, seed=0)
        np.testing.assert_allclose(step.gaze.as_array(), expected, atol=1e-6)
        np.testing.assert_allclose(step.gaze_trajectory, np.tile(expected, (16, 1)), atol=1e-6)
        chunk = euler_sample(policy, foveated_observation(self.image, step.gaze, proprio), seed=0)[0].numpy()
        np.testing.assert_array_equal(step.chunk, chunk)

    def test_gaze_as_action_step(self):
        policy = FlowPolicy(PolicyConfig(action_dim=4, proprio_dim=4), self.encoder).eval()
        history = GazeHistory()
        step = gaze_as_action_step(self.image, history, policy, np.array([0.5, 0.5]), seed=0)
        self.assertEqual(step.chunk.shape, (16, 4))
        self.assertEqual(step.actions.shape, (16, 2))
        self.assertEqual(step.gaze, GazePoint.center())
        self.assertTrue(np.all((step.gaze_trajectory >= 0.0) & (step.gaze_trajectory <= 1.0)))
        self.assertEqual(history.last, GazePoint.from_array(step.gaze_trajectory[0]))


class GazeAsActionTrainingTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        base = PolicyConfig(
            chunk_size=4,
            n_img_tokens=4,
            lr=1e-3,
            steps=800,
            batch_size=32,
            proprio_dropout=0.0,
            seed=0,
            log_every=0,
        )
        config, encoder = variant_policy_config("fov-act", base)
        cls.validation = ReachDataset(reach_episodes(8, seed=1), "fov-act", config.chunk_size)
        torch.manual_seed(0)
        dataset = ReachDataset(reach_episodes(32, seed=0), "fov-act", config.chunk_size)
        cls.result = train_policy(FlowPolicy(config, encoder), dataset, config)

    def test_tracks_the_scripted_gaze(self):
        error = open_loop_gaze_error(self.result.policy, self.validation, n_frames=128, seed=2)
        self.assertLess(error, 0.08)


if __name__ == "__main__":
    unittest.main()
