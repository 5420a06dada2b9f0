from __future__ import annotations

import os
from dataclasses import asdict
from typing import Any

from flask import Flask, jsonify, request, send_from_directory

from apps.foveation.flops import PRESETS, flops_table
from apps.foveation.fovea import PatternKind, build_pattern
from apps.foveation.sync import JITTER_KINDS, LatencyModel, sinusoid_benchmark
from config.paths import DOCS_DATA_DIR, RUNS_DIR

MAX_BATCH = 4096
MAX_SYNC_SECONDS = 60.0

app = Flask(__name__)


def _json_error(message: str, status: int = 400):
    return jsonify({"error": message}), status


def _pattern_payload(kind: PatternKind) -> dict[str, Any]:
    pattern = build_pattern(kind)
    return {
        "kind": kind.value,
        "canvas": [pattern.canvas_width, pattern.canvas_height],
        "n_tokens": pattern.n_tokens,
        "token_side": pattern.token_side,
        "embed_input": pattern.embed_input,
        "patches": [asdict(patch) for patch in pattern.patches],
        "text": pattern.to_text(),
    }


def _float_field(payload: dict[str, Any], key: str, default: float) -> float:
    value = payload.get(key, default)
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValueError(f"'{key}' must be a number.")
    return float(value)


@app.get("/")
@app.get("/api/meta")
def api_meta():
    return jsonify(
        {
            "patterns": {kind.value: build_pattern(kind).n_tokens for kind in PatternKind},
            "presets": list(PRESETS),
            "jitter_kinds": list(JITTER_KINDS),
            "routes": ["/api/meta", "/api/pattern/<kind>", "/api/flops", "/api/syncdemo", "/data/<file>", "/runs/<path>"],
        }
    )


@app.get("/api/pattern/<kind>")
def api_pattern(kind: str):
    try:
        parsed = PatternKind.parse(kind)
    except ValueError as exc:
        return _json_error(str(exc), status=404)
    return jsonify(_pattern_payload(parsed))


@app.get("/api/flops")
def api_flops():
    batch_raw = request.args.get("batch", "64")
    preset = request.args.get("preset", "vit-b")
    try:
        batch = int(batch_raw)
    except ValueError:
        return _json_error(f"batch must be an integer, got {batch_raw!r}")
    if not 1 <= batch <= MAX_BATCH:
        return _json_error(f"batch must lie in [1, {MAX_BATCH}]")
    if preset not in PRESETS:
        return _json_error(f"Unknown preset {preset!r} (expected one of: {', '.join(PRESETS)})")
    table = flops_table(batch=batch, preset=preset)
    return jsonify({"batch": batch, "preset": preset, "rows": table.to_dict(orient="records")})


@app.post("/api/syncdemo")
def api_syncdemo():
    payload = request.get_json(silent=True) or {}
    if not isinstance(payload, dict):
        return _json_error("Request body must be a JSON object.")
    try:
        latency = LatencyModel(
            base_delay=_float_field(payload, "base_delay", 0.08),
            jitter=str(payload.get("jitter", "exponential")),
            jitter_scale=_float_field(payload, "jitter_scale", 0.03),
            drop_prob=_float_field(payload, "drop_prob", 0.5),
        )
        seconds = _float_field(payload, "seconds", 4.0)
        if not 0.0 < seconds <= MAX_SYNC_SECONDS:
            raise ValueError(f"'seconds' must lie in (0, {MAX_SYNC_SECONDS}].")
        seed = int(_float_field(payload, "seed", 0))
        report = sinusoid_benchmark(latency, seconds=seconds, seed=seed)
    except ValueError as exc:
        return _json_error(str(exc), status=400)

    return jsonify(
        {
            "latency": asdict(latency),
            "max_error": report.max_error,
            "mean_error": report.mean_error,
            "max_error_with_hold": report.max_error_with_hold,
            "n_frames": report.n_frames,
            "n_samples": report.n_samples,
            "gaps": report.gap_errors.to_dict(orient="records"),
        }
    )


@app.get("/data/<path:filename>")
def data_static(filename: str):
    return send_from_directory(DOCS_DATA_DIR, filename)


@app.get("/runs/<path:path>")
def runs_static(path: str):
    return send_from_directory(RUNS_DIR, path)


if __name__ == "__main__":
    host = os.getenv("HOST", "127.0.0.1")
    port = int(os.getenv("PORT", "5000"))
    app.run(host=host, port=port, debug=False)
