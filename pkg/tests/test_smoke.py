import unittest

from config.paths import APPS_DIR, CONFIG_DIR, DEFAULT_CONFIG_INI, PROJECT_ROOT
from server import app


class StructureSmokeTests(unittest.TestCase):
    def test_core_directories_exist(self):
        self.assertTrue(APPS_DIR.exists())
        self.assertTrue(CONFIG_DIR.exists())

    def test_entrypoints_exist(self):
        self.assertTrue(DEFAULT_CONFIG_INI.exists())
        self.assertTrue((PROJECT_ROOT / "cli.py").exists())
        self.assertTrue((PROJECT_ROOT / "server.py").exists())
        self.assertTrue((PROJECT_ROOT / "scripts" / "build" / "build_static_artifacts.py").exists())


class FlaskSmokeTests(unittest.TestCase):
    def setUp(self):
        self.client = app.test_client()

    def test_root_route(self):
        res = self.client.get("/")
        self.assertEqual(res.status_code, 200)
        res.close()

    def test_meta_route(self):
        res = self.client.get("/api/meta")
        self.assertEqual(res.status_code, 200)
        payload = res.get_json()
        self.assertEqual(payload["patterns"], {"foveated": 20, "fine": 324, "coarse": 20})
        self.assertIn("vit-b", payload["presets"])
        res.close()

    def test_pattern_route(self):
        res = self.client.get("/api/pattern/foveated")
        self.assertEqual(res.status_code, 200)
        payload = res.get_json()
        self.assertEqual(payload["n_tokens"], 20)
        self.assertEqual(len(payload["patches"]), 20)
        self.assertEqual(payload["canvas"], [288, 288])
        res.close()

    def test_unknown_pattern_route(self):
        res = self.client.get("/api/pattern/bogus")
        self.assertEqual(res.status_code, 404)
        self.assertIn("error", res.get_json())
        res.close()

    def test_flops_route(self):
        res = self.client.get("/api/flops?batch=8&preset=vit-b")
        self.assertEqual(res.status_code, 200)
        payload = res.get_json()
        self.assertEqual(payload["batch"], 8)
        self.assertEqual([row["pattern"] for row in payload["rows"]], ["fine", "coarse", "foveated"])
        res.close()

    def test_flops_route_rejects_bad_input(self):
        for query in ("batch=abc", "batch=0", "preset=vit-h"):
            with self.subTest(query=query):
                res = self.client.get(f"/api/flops?{query}")
                self.assertEqual(res.status_code, 400)
                res.close()

    def test_syncdemo_route(self):
        res = self.client.post("/api/syncdemo", json={})
        self.assertEqual(res.status_code, 200)
        payload = res.get_json()
        self.assertLess(payload["max_error"], 0.01)
        self.assertEqual(payload["n_frames"], 100)
        self.assertEqual([row["gap"] for row in payload["gaps"]], [1, 2, 4, 8])
        res.close()

    def test_syncdemo_route_rejects_bad_input(self):
        for body in ({"jitter": "gaussian"}, {"drop_prob": 1.5}, {"seconds": "long"}):
            with self.subTest(body=body):
                res = self.client.post("/api/syncdemo", json=body)
                self.assertEqual(res.status_code, 400)
                res.close()

    def test_missing_data_file(self):
        res = self.client.get("/data/missing.json")
        self.assertEqual(res.status_code, 404)
        res.close()


if __name__ == "__main__":
    unittest.main()
