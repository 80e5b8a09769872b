import json
import math
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

import serann

REPO = Path(__file__).resolve().parents[2]


def tone(hz, seconds, amp=0.5, rate=16000):
    n = np.arange(int(seconds * rate))
    return amp * np.sin(2 * math.pi * hz * n / rate)


def test_mel_shape_and_range():
    mel = serann.mel_spectrogram(tone(440.0, 2.0))
    assert mel.shape == (80, 256)
    assert mel.min() >= -1.0 and mel.max() <= 1.0


def test_pitch_and_energy():
    assert abs(serann.average_pitch(tone(200.0, 1.0)) - 200.0) <= 3.0
    assert abs(serann.average_energy(tone(250.0, 1.0)) - 0.5 / math.sqrt(2)) <= 1e-3


def test_quantize_matches_numpy():
    rng = np.random.default_rng(3)
    book = rng.uniform(-1, 1, size=(32, 8))
    z = rng.uniform(-1.5, 1.5, size=(200, 8))
    want = np.argmin(((z[:, None, :] - book[None, :, :]) ** 2).sum(-1), axis=1)
    assert list(serann.quantize(z, book)) == list(want)


def test_uar():
    assert serann.uar(np.full((4, 4), 0) + np.eye(4) * 5) == 1.0
    one_class = np.zeros((4, 4))
    one_class[:, 2] = 7
    assert serann.uar(one_class) == 0.25
    with pytest.raises(serann.SerannError):
        serann.uar(np.zeros((4, 4)))


def test_parse_label():
    assert serann.parse_label("Emotion: Joy.") == "happy"
    assert serann.parse_label("no idea") is None


def test_cli_round_trip(tmp_path):
    corpus = tmp_path / "corpus"
    rc, _, err = serann.run(["synth", "--out", str(corpus), "--speakers", "2", "--per-class", "1",
                             "--seconds", "0.5"])
    assert rc == 0, err
    samples, rate = serann.read_wav(next(corpus.glob("**/*.wav")))
    assert rate == 16000 and samples.ndim == 1
    rc, _, err = serann.run(["features", "--manifest", str(corpus / "manifest.jsonl"),
                             "--out", str(tmp_path / "feat")])
    assert rc == 0, err
    report = json.loads((tmp_path / "feat" / "features_report.json").read_text())
    assert report["kind"] == "features_report"
    check = subprocess.run([sys.executable, str(REPO / "tools" / "validate_reports.py"),
                            str(tmp_path / "feat" / "features_report.json")])
    assert check.returncode == 0
    rc, _, err = serann.run(["features", "--manifest", str(tmp_path / "missing.jsonl"), "--out", str(tmp_path)])
    assert rc != 0
