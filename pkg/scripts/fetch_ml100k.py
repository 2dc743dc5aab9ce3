"""Extract MovieLens-100k from the recbole wheel into a userId,movieId,rating,timestamp CSV.

ML-latest is not bundled by any package on the mirror; ML-100k is the
closest MovieLens release that is, and serves as a stand-in for desk runs.

    python scripts/fetch_ml100k.py data/ml-100k.csv
"""
import argparse
import csv
import glob
import io
import subprocess
import sys
import tempfile
import zipfile

MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("out")
    ap.add_argument("--wheel", help="path to a recbole wheel; downloaded when omitted")
    args = ap.parse_args(argv)
    wheel = args.wheel
    if wheel is None:
        tmp = tempfile.mkdtemp()
        subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "-q", "recbole==1.2.1",
                        "-d", tmp], check=True)
        wheel = glob.glob(f"{tmp}/recbole-*.whl")[0]
    with zipfile.ZipFile(wheel) as zf:
        text = zf.read(MEMBER).decode()
    rows = list(csv.reader(io.StringIO(text), delimiter="\t"))
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["userId", "movieId", "rating", "timestamp"])
        for user, item, rating, ts in rows[1:]:
            w.writerow([user, item, rating, int(float(ts))])
    print(f"wrote {len(rows) - 1} interactions to {args.out}")


if __name__ == "__main__":
    main()
