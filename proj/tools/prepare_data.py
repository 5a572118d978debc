#!/usr/bin/env python3
"""Fetch MNIST / CIFAR-10 from npm package mirrors and lay them out as the
canonical binary containers (IDX for MNIST, 3073-byte records for CIFAR-10).

Usage: prepare_data.py [DATA_DIR]   (default: $GANDEF_DATA_DIR or ./data)
"""
import hashlib
import json
import os
import shutil
import subprocess
import sys
import tarfile
import tempfile

import numpy as np
from PIL import Image


def npm_pack(spec, workdir):
    out = subprocess.run(["npm", "pack", spec, "--silent"], cwd=workdir,
                         check=True, capture_output=True, text=True)
    tgz = os.path.join(workdir, out.stdout.strip().splitlines()[-1])
    dest = os.path.join(workdir, spec.replace("@", "_"))
    with tarfile.open(tgz) as tf:
        tf.extractall(dest)
    return os.path.join(dest, "package")


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def prepare_mnist(root, work):
    dst = os.path.join(root, "mnist")
    os.makedirs(dst, exist_ok=True)
    pkg = npm_pack("mnist-data@1.2.6", work)
    files = {}
    for name in ["train-images-idx3-ubyte", "train-labels-idx1-ubyte",
                 "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"]:
        shutil.copy(os.path.join(pkg, "data", name), os.path.join(dst, name))
        files[name] = sha256(os.path.join(dst, name))
    return {"name": "mnist", "dir": "mnist",
            "train_images": "train-images-idx3-ubyte",
            "train_labels": "train-labels-idx1-ubyte",
            "test_images": "t10k-images-idx3-ubyte",
            "test_labels": "t10k-labels-idx1-ubyte",
            "sha256": files}


def sprite_to_records(png, labels):
    # Each sprite row holds one 32x32 RGB image in HWC order.
    pixels = np.asarray(Image.open(png).convert("RGB"), dtype=np.uint8)
    n = pixels.shape[0]
    assert n == len(labels)
    planar = pixels.reshape(n, 32, 32, 3).transpose(0, 3, 1, 2).reshape(n, 3072)
    recs = np.empty((n, 3073), dtype=np.uint8)
    recs[:, 0] = np.asarray(labels, dtype=np.uint8)
    recs[:, 1:] = planar
    return recs.tobytes()


def prepare_cifar(root, work):
    dst = os.path.join(root, "cifar10")
    os.makedirs(dst, exist_ok=True)
    pkg = npm_pack("tfjs-cifar10@1.1.1", work)
    with open(os.path.join(pkg, "train_lables.json")) as f:
        train_labels = json.load(f)
    with open(os.path.join(pkg, "test_lables.json")) as f:
        test_labels = json.load(f)
    files = {}
    for i in range(5):
        name = f"data_batch_{i + 1}.bin"
        data = sprite_to_records(os.path.join(pkg, f"data_batch_{i + 1}.png"),
                                 train_labels[i * 10000:(i + 1) * 10000])
        with open(os.path.join(dst, name), "wb") as f:
            f.write(data)
        files[name] = sha256(os.path.join(dst, name))
    data = sprite_to_records(os.path.join(pkg, "test_batch.png"), test_labels)
    with open(os.path.join(dst, "test_batch.bin"), "wb") as f:
        f.write(data)
    files["test_batch.bin"] = sha256(os.path.join(dst, "test_batch.bin"))
    return {"name": "cifar10", "dir": "cifar10",
            "train_batches": [f"data_batch_{i + 1}.bin" for i in range(5)],
            "test_batches": ["test_batch.bin"],
            "sha256": files}


def main():
    root = sys.argv[1] if len(sys.argv) > 1 else os.environ.get("GANDEF_DATA_DIR", "data")
    os.makedirs(root, exist_ok=True)
    with tempfile.TemporaryDirectory() as work:
        manifest = {"datasets": [prepare_mnist(root, work), prepare_cifar(root, work)]}
    with open(os.path.join(root, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    print(f"wrote {os.path.join(root, 'manifest.json')}")


if __name__ == "__main__":
    main()
