import csv
import wave as wavio

import numpy as np


def write_recording_dir(rng, d, sr=8000, seconds=2):
    """Minimal on-disk recording: 3 PNG frames, stereo PCM16, 200 Hz IMU CSV, window labels."""
    from PIL import Image

    (d / "frames").mkdir(parents=True)
    for ts in (0, 500, 1000):
        Image.fromarray(rng.integers(0, 255, (10, 14, 3), dtype=np.uint8)).save(d / "frames" / f"{ts}.png")
    pcm = (rng.uniform(-0.3, 0.3, (int(seconds * sr), 2)) * 32767).astype("<i2")
    with wavio.open(str(d / "audio.wav"), "wb") as wf:
        wf.setnchannels(2)
        wf.setsampwidth(2)
        wf.setframerate(sr)
        wf.writeframes(pcm.tobytes())
    with open(d / "wave.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp_ms"] + [f"c{i}" for i in range(9)])
        for t in range(seconds * 200):
            w.writerow([t * 5] + list(rng.standard_normal(9)))
    with open(d / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["window_start_ms", "label"])
        w.writerows([[0, "strong"], [500, "weak"], [1000, "none"]])
    return pcm
