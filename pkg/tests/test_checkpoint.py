import tempfile
import unittest
from pathlib import Path

import numpy as np
import torch

from apps.foveation.checkpoint import (
    load_checkpoint,
    load_gaze_predictor,
    load_mae,
    load_policy,
    save_gaze_predictor,
    save_mae,
    save_policy,
)
from apps.foveation.encoder import EncoderConfig
from apps.foveation.errors import EpisodeFormatError
from apps.foveation.gaze import GazePredictor, GazePredictorConfig
from apps.foveation.mae import MaeConfig, MaskedAutoencoder
from apps.foveation.policy import FlowPolicy, PolicyConfig


class CheckpointTests(unittest.TestCase):
    def setUp(self):
        torch.manual_seed(0)
        self._tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def assertStatesEqual(self, a: dict, b: dict):
        self.assertEqual(sorted(a), sorted(b))
        for name in a:
            self.assertTrue(torch.equal(a[name], b[name]), name)

    def test_policy_with_encoder(self):
        policy = FlowPolicy(PolicyConfig(proprio_dim=4, dim=32, depth=1), EncoderConfig.desk("foveated", depth=1))
        loaded = load_policy(save_policy(self.dir / "policy.npz", policy))
        self.assertEqual(loaded.config, policy.config)
        self.assertEqual(loaded.encoder_config, policy.encoder_config)
        self.assertStatesEqual(loaded.state_dict(), policy.state_dict())
        self.assertFalse(loaded.training)

    def test_policy_without_encoder(self):
        policy = FlowPolicy(PolicyConfig(chunk_size=1, dim=32, depth=1))
        loaded = load_policy(save_policy(self.dir / "policy.npz", policy))
        self.assertIsNone(loaded.encoder_config)
        self.assertStatesEqual(loaded.state_dict(), policy.state_dict())

    def test_gaze_predictor(self):
        predictor = GazePredictor(GazePredictorConfig(grid=9))
        loaded = load_gaze_predictor(save_gaze_predictor(self.dir / "gaze.npz", predictor))
        self.assertEqual(loaded.config, predictor.config)
        self.assertStatesEqual(loaded.state_dict(), predictor.state_dict())

    def test_mae(self):
        encoder = EncoderConfig.desk("foveated")
        mae = MaeConfig(decoder_dim=16)
        model = MaskedAutoencoder(encoder, mae.decoder_config(encoder))
        loaded, loaded_encoder = load_mae(save_mae(self.dir / "mae.npz", model, encoder, mae))
        self.assertEqual(loaded_encoder, encoder)
        self.assertStatesEqual(loaded.state_dict(), model.state_dict())

    def test_wrong_kind(self):
        path = save_gaze_predictor(self.dir / "gaze.npz", GazePredictor())
        with self.assertRaises(EpisodeFormatError):
            load_policy(path)

    def test_plain_npz_is_not_a_checkpoint(self):
        path = self.dir / "plain.npz"
        np.savez(path, weights=np.zeros(3))
        with self.assertRaises(EpisodeFormatError):
            load_checkpoint(path)

    def test_missing_file(self):
        with self.assertRaises(FileNotFoundError):
            load_policy(self.dir / "nope.npz")


if __name__ == "__main__":
    unittest.main()
