"""Shared datasets and trained models. Training runs go through the CLI once per session."""
import contextlib
import io
import json
import time

import pytest

from mmfusion import cli, container, training

SMOKE_IMAGES = 210
SMOKE_SEED = 0


def run_cli(*argv):
    """Run the CLI in-process; returns (exit code, stdout, stderr)."""
    out, err = io.StringIO(), io.StringIO()
    with contextlib.redirect_stdout(out), contextlib.redirect_stderr(err):
        code = cli.main([str(a) for a in argv])
    return code, out.getvalue(), err.getvalue()


def train_model(manifest, out, *flags):
    start = time.process_time()
    wall = time.perf_counter()
    code, stdout, stderr = run_cli("train", manifest, "--out", out, *flags)
    assert code == 0, stderr
    summary = json.loads(stdout)
    summary["cpu_seconds"] = time.process_time() - start
    summary["wall_seconds"] = time.perf_counter() - wall
    return summary


def training_accuracy(model_path, manifest):
    det, _ = container.load_model(model_path)
    samples = training.build_samples(training.read_manifest(manifest), det.config)
    return training.evaluate(det, samples)["accuracy"]


@pytest.fixture(scope="session")
def smoke_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    code, stdout, _ = run_cli("synth", "--out", out, "--n-images", SMOKE_IMAGES, "--seed", SMOKE_SEED)
    assert code == 0
    return stdout.strip()


@pytest.fixture(scope="session")
def smoke_model(smoke_manifest, tmp_path_factory):
    """CNN_1C with scale-space fusion on the 210-image set, default training schedule."""
    out = tmp_path_factory.mktemp("fg") / "fg.bin"
    summary = train_model(smoke_manifest, out, "--fusion", "scale", "--head", "cnn1c",
                          "--seed", SMOKE_SEED)
    summary["accuracy"] = training_accuracy(out, smoke_manifest)
    return summary


@pytest.fixture(scope="session")
def intensity_models(smoke_manifest, tmp_path_factory):
    """Both heads on the intensity column alone, same seed and data."""
    d = tmp_path_factory.mktemp("intensity")
    res = {}
    for head in ("CNN_1C", "CNN_0C"):
        out = d / f"{head}.bin"
        summary = train_model(smoke_manifest, out, "--fusion", "none", "--head", head, "--seed", SMOKE_SEED)
        summary["accuracy"] = training_accuracy(out, smoke_manifest)
        res[head] = summary
    return res


@pytest.fixture(scope="session")
def tiny_manifest(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny")
    code, stdout, _ = run_cli("synth", "--out", out, "--n-images", 9, "--size", 32, "--seed", 1)
    assert code == 0
    return stdout.strip()


@pytest.fixture(scope="session")
def tiny_model(tiny_manifest, tmp_path_factory):
    out = tmp_path_factory.mktemp("tinymodel") / "m.bin"
    train_model(tiny_manifest, out, "--epochs", 2, "--fusion", "scale")
    return out
