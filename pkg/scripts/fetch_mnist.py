"""Download the four MNIST IDX files into a directory and verify them.

    python scripts/fetch_mnist.py [target_dir]      # default: data/mnist

Tries an HTTPS mirror of the original gzipped files first. If that fails
(offline machine with only a package mirror), it falls back to the
``mnist-data`` npm package, which ships the same files uncompressed.
Files are stored uncompressed and checked against known MD5 sums.
"""
import gzip
import hashlib
import io
import shutil
import subprocess
import sys
import tarfile
import tempfile
import urllib.request
from pathlib import Path

MD5 = {
    "train-images-idx3-ubyte": "6bbc9ace898e44ae57da46a324031adb",
    "train-labels-idx1-ubyte": "a25bea736e30d166cdddb491f175f624",
    "t10k-images-idx3-ubyte": "2646ac647ad5339dbf082846283269ea",
    "t10k-labels-idx1-ubyte": "27ae3e4e09519cfbb04c329615203637",
}
MIRRORS = ["https://ossci-datasets.s3.amazonaws.com/mnist/"]
NPM_PACKAGE = "mnist-data@1.2.6"


def md5(data):
    return hashlib.md5(data).hexdigest()


def from_mirror(name):
    for base in MIRRORS:
        try:
            with urllib.request.urlopen(base + name + ".gz", timeout=60) as r:
                return gzip.decompress(r.read())
        except OSError as exc:
            print(f"  {base}: {exc}", file=sys.stderr)
    return None


def from_npm(names):
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(["npm", "pack", NPM_PACKAGE, "--silent"], cwd=tmp, check=True, capture_output=True)
        tgz = next(Path(tmp).glob("*.tgz"))
        out = {}
        with tarfile.open(tgz) as tar:
            for member in tar.getmembers():
                name = Path(member.name).name
                if name in names:
                    out[name] = tar.extractfile(member).read()
        return out


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    target = Path(argv[0] if argv else "data/mnist")
    target.mkdir(parents=True, exist_ok=True)
    missing = [n for n in MD5 if not ((target / n).exists() and md5((target / n).read_bytes()) == MD5[n])]
    fetched = {}
    for name in missing:
        print(f"fetching {name}")
        data = from_mirror(name)
        if data is not None:
            fetched[name] = data
    rest = [n for n in missing if n not in fetched]
    if rest:
        print(f"falling back to npm package {NPM_PACKAGE}")
        fetched.update(from_npm(rest))
    for name in missing:
        data = fetched.get(name)
        if data is None or md5(data) != MD5[name]:
            print(f"error: could not obtain a verified copy of {name}", file=sys.stderr)
            return 1
        with open(target / name, "wb") as f:
            shutil.copyfileobj(io.BytesIO(data), f)
    print(f"MNIST ready in {target}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
