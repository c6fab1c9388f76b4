"""Regenerates the golden protocol transcript and CFXT fixtures.

Written independently of the Rust encoders: frames and tensors are packed by
hand with `struct`, and the witness model is evaluated in float64 the same
way a reader of the protocol description would.
"""

import json
import struct
from pathlib import Path

import numpy as np

HERE = Path(__file__).parent

SPEC = {
    "kind": "region_witness",
    "height": 2,
    "width": 3,
    "region": [[0, 0], [1, 2]],
    "theta": 0.4,
}


def frame(header, payload=()):
    body = json.dumps(header, separators=(",", ":")).encode()
    out = struct.pack("<I", len(body)) + body
    for v in payload:
        out += struct.pack("<f", v)
    return out


def witness_scores(image, c, h, w):
    # image is float32, laid out c-major; mean over region pixels and channels
    total = 0.0
    count = 0
    for ch in range(c):
        for p in range(h * w):
            r, col = divmod(p, w)
            if [r, col] in SPEC["region"]:
                total += float(image[ch * h * w + p])
                count += 1
    m = total / count
    theta = SPEC["theta"]
    return [np.float32(theta - m), np.float32(m - theta)]


def predict(images, c, h, w):
    flat = np.concatenate(images).astype(np.float32)
    req = frame({"op": "predict", "n": len(images), "c": c, "h": h, "w": w}, flat)
    scores = []
    for img in images:
        scores.extend(witness_scores(np.asarray(img, dtype=np.float32), c, h, w))
    resp = frame({"op": "scores", "n": len(images), "k": 2}, scores)
    return req, resp


def transcript():
    req, resp = [], []

    req.append(frame({"op": "hello", "version": 1}))
    resp.append(frame({"op": "hello", "version": 1, "num_classes": 2}))

    imgs = [
        np.array([0.9, 0.1, 0.2, 0.3, 0.4, 0.7], dtype=np.float32),
        np.array([0.1, 1.0, 1.0, 1.0, 1.0, 0.2], dtype=np.float32),
    ]
    r, s = predict(imgs, 1, 2, 3)
    req.append(r)
    resp.append(s)

    two_channel = [np.array([0.25, 0, 0, 0, 0, 0.5, 0.125, 0, 0, 0, 0, 0.75], dtype=np.float32)]
    r, s = predict(two_channel, 2, 2, 3)
    req.append(r)
    resp.append(s)

    req.append(struct.pack("<I", 0))
    resp.append(frame({"op": "error", "msg": "empty header"}))

    req.append(frame({"op": "hello", "version": 2}))
    resp.append(frame({"op": "error", "msg": "unsupported protocol version 2"}))

    req.append(frame({"op": "predict", "n": 1, "c": 1, "h": 3, "w": 3}, [0.5] * 9))
    resp.append(frame({"op": "error", "msg": "dimension mismatch: witness region 2x3 does not match image 3x3"}))

    req.append(frame({"op": "scores", "n": 1, "k": 2}, [0.5, 0.5]))
    resp.append(frame({"op": "error", "msg": "unexpected op from client"}))

    r, s = predict([np.array([0.4, 0, 0, 0, 0, 0.4], dtype=np.float32)], 1, 2, 3)
    req.append(r)
    resp.append(s)

    return b"".join(req), b"".join(resp)


def cfxt(dims, values):
    out = b"CFXT" + bytes([1, 1, len(dims)])
    for d in dims:
        out += struct.pack("<I", d)
    for v in values:
        out += struct.pack("<f", v)
    return out


def main():
    (HERE / "witness_spec.json").write_text(json.dumps(SPEC, indent=2) + "\n")
    req, resp = transcript()
    (HERE / "transcript.request.bin").write_bytes(req)
    (HERE / "transcript.response.bin").write_bytes(resp)
    values = [0.0, -0.0, 1.5, -2.25, 1e-45, 3.4028234663852886e38, 0.1, -0.3]
    (HERE / "image_2x2x2.cfxt").write_bytes(cfxt([2, 2, 2], values))


if __name__ == "__main__":
    main()
