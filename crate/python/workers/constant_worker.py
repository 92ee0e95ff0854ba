#!/usr/bin/env python3
"""Minimal detector worker: emits one fixed detection per patch.

Protocol: print {"ready": true} once, then for each NDJSON job line
{"patch_id", "image_path", "width", "height"} print one result line
{"patch_id", "detections": [{"x", "y", "score", "label"}, ...]}.

Useful as a template for wrapping a real model and for exercising
`mitokit infer --detector worker`.
"""

import json
import sys


def main() -> None:
    print(json.dumps({"ready": True}), flush=True)
    for line in sys.stdin:
        job = json.loads(line)
        det = {
            "x": job["width"] / 2.0,
            "y": job["height"] / 2.0,
            "score": 0.9,
            "label": "mitotic_figure",
        }
        print(json.dumps({"patch_id": job["patch_id"], "detections": [det]}), flush=True)


if __name__ == "__main__":
    main()
