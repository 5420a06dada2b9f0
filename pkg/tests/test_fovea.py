import unittest

import numpy as np

from apps.foveation.errors import NonFiniteError, ShapeMismatchError
from apps.foveation.fovea import (
    GazePoint,
    PatternKind,
    TokenizationPattern,
    assemble,
    build_pattern,
    gaze_offset,
    gaze_to_pixel,
    pixel_to_gaze,
    shift_for_gaze,
    tokenize,
    tokenize_any,
)


def _random_image(height: int, width: int, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).random((height, width, 3)).astype(np.float32)


class PatternGeometryTests(unittest.TestCase):
    def test_token_counts(self):
        self.assertEqual(build_pattern("foveated").n_tokens, 20)
        self.assertEqual(build_pattern("fine").n_tokens, 324)
        self.assertEqual(build_pattern("coarse").n_tokens, 20)

    def test_canvas_sizes(self):
        fov = build_pattern(PatternKind.FOVEATED)
        coarse = build_pattern(PatternKind.COARSE)
        self.assertEqual((fov.canvas_width, fov.canvas_height), (288, 288))
        self.assertEqual((coarse.canvas_width, coarse.canvas_height), (320, 256))

    def test_every_pattern_partitions_its_canvas(self):
        for kind in PatternKind:
            with self.subTest(kind=kind.value):
                self.assertTrue(build_pattern(kind).is_partition())

    def test_foveated_levels_are_ordered_and_sized(self):
        pattern = build_pattern(PatternKind.FOVEATED)
        levels = [p.level for p in pattern.patches]
        self.assertEqual(levels, sorted(levels))
        self.assertEqual([levels.count(level) for level in (0, 1, 2)], [4, 8, 8])
        self.assertEqual({p.size for p in pattern.patches if p.level == 1}, {32})
        self.assertEqual({p.size for p in pattern.patches if p.level == 2}, {96})
        self.assertEqual(pattern.fovea_box(), (128, 128, 160, 160))

    def test_text_round_trip(self):
        for kind in PatternKind:
            pattern = build_pattern(kind)
            self.assertEqual(TokenizationPattern.from_text(pattern.to_text()), pattern)

    def test_unknown_kind_raises(self):
        with self.assertRaises(ValueError):
            build_pattern("radial")


class GazeConversionTests(unittest.TestCase):
    def test_gaze_is_clamped(self):
        gaze = GazePoint(1.4, -0.2)
        self.assertEqual((gaze.x, gaze.y), (1.0, 0.0))
        self.assertEqual(gaze_to_pixel(gaze, 288, 288), (287, 0))

    def test_non_finite_gaze_raises(self):
        with self.assertRaises(NonFiniteError):
            GazePoint(float("nan"), 0.5)

    def test_pixel_round_trip_within_half_pixel(self):
        rng = np.random.default_rng(3)
        for x, y in rng.uniform(0.0, 0.99, size=(50, 2)):
            px, py = gaze_to_pixel(GazePoint(x, y), 288, 256)
            back = pixel_to_gaze(px, py, 288, 256)
            self.assertLessEqual(abs(back.x - x) * 288, 0.5 + 1e-9)
            self.assertLessEqual(abs(back.y - y) * 256, 0.5 + 1e-9)

    def test_center_gaze_has_zero_offset(self):
        self.assertEqual(gaze_offset(GazePoint.center(), 288, 288), (0, 0))


class TokenizeTests(unittest.TestCase):
    def test_center_shift_is_identity(self):
        pattern = build_pattern(PatternKind.FOVEATED)
        image = _random_image(288, 288)
        np.testing.assert_array_equal(shift_for_gaze(image, GazePoint.center(), pattern), image)

    def test_fine_round_trip_is_exact(self):
        pattern = build_pattern(PatternKind.FINE)
        image = _random_image(288, 288, seed=1)
        np.testing.assert_array_equal(assemble(tokenize(image, pattern)), image)

    def test_foveal_region_round_trip_is_exact(self):
        pattern = build_pattern(PatternKind.FOVEATED)
        image = _random_image(288, 288, seed=2)
        gaze = GazePoint(0.4, 0.6)
        dx, dy = gaze_offset(gaze, 288, 288)
        restored = assemble(tokenize(image, pattern, gaze))
        x0, y0, x1, y1 = pattern.fovea_box()
        region = (slice(y0 - dy, y1 - dy), slice(x0 - dx, x1 - dx))
        np.testing.assert_array_equal(restored[region], image[region])

    def test_invariants_over_random_images_and_gazes(self):
        foveated = build_pattern(PatternKind.FOVEATED)
        fine = build_pattern(PatternKind.FINE)
        x0, y0, x1, y1 = foveated.fovea_box()
        rng = np.random.default_rng(7)
        for _ in range(100):
            image = rng.random((288, 288, 3)).astype(np.float32)
            gaze = GazePoint(*rng.random(2))
            restored = assemble(tokenize(image, foveated, gaze))
            np.testing.assert_array_equal(
                shift_for_gaze(restored, gaze, foveated)[y0:y1, x0:x1],
                shift_for_gaze(image, gaze, foveated)[y0:y1, x0:x1],
            )
            np.testing.assert_array_equal(assemble(tokenize(image, fine)), image)

    def test_corner_gaze_zero_pads_three_quarters(self):
        pattern = build_pattern(PatternKind.FOVEATED)
        shifted = shift_for_gaze(np.ones((288, 288, 3), dtype=np.float32), GazePoint(0.0, 0.0), pattern)
        self.assertEqual(float((shifted == 0.0).mean()), 0.75)
        self.assertTrue(np.all(shifted[144:, 144:] == 1.0))

    def test_tokens_lie_within_their_source_range(self):
        pattern = build_pattern(PatternKind.FOVEATED)
        image = _random_image(288, 288, seed=4)
        tokenized = tokenize(image, pattern, GazePoint.center())
        for patch, token in zip(pattern.patches, tokenized.tokens):
            source = image[patch.rows, patch.cols]
            self.assertGreaterEqual(token.min(), source.min() - 1e-6)
            self.assertLessEqual(token.max(), source.max() + 1e-6)

    def test_token_shapes(self):
        image = _random_image(288, 288)
        self.assertEqual(tokenize_any(image, "foveated", GazePoint.center()).tokens.shape, (20, 16, 16, 3))
        self.assertEqual(tokenize_any(image, "fine").tokens.shape, (324, 16, 16, 3))
        self.assertEqual(tokenize_any(image, "coarse").tokens.shape, (20, 64, 64, 3))
        self.assertEqual(tokenize_any(image, "foveated", GazePoint.center()).flat().shape, (20, 768))

    def test_foveated_needs_gaze(self):
        with self.assertRaises(ValueError):
            tokenize(_random_image(288, 288), build_pattern("foveated"))

    def test_wrong_canvas_raises(self):
        with self.assertRaises(ShapeMismatchError):
            tokenize(_random_image(100, 100), build_pattern("fine"))

    def test_non_finite_image_raises(self):
        image = _random_image(288, 288)
        image[5, 5, 0] = np.inf
        with self.assertRaises(NonFiniteError):
            tokenize(image, build_pattern("fine"))


if __name__ == "__main__":
    unittest.main()
