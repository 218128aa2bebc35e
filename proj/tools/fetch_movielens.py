#!/usr/bin/env python3
"""Materialize MovieLens-100K in its original file layout.

GroupLens' download host is not always reachable, so this script pulls the
copy bundled inside the RecBole wheel (ratings and users are verbatim; item
metadata is stored as title / year / genre-name columns) and rewrites it as
``u.data``, ``u.item`` and ``u.user``. ``u.item`` is written in Latin-1 like
the historical release.

    python3 tools/fetch_movielens.py --out data/ml-100k
    python3 tools/fetch_movielens.py --wheel recbole-1.2.1-py3-none-any.whl
"""

import argparse
import pathlib
import subprocess
import sys
import tempfile
import urllib.parse
import zipfile

GENRES = [
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy",
    "Crime", "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror",
    "Musical", "Mystery", "Romance", "Sci-Fi", "Thriller", "War", "Western",
]
PREFIX = "recbole/dataset_example/ml-100k/ml-100k."


def fetch_wheel(dest: pathlib.Path) -> pathlib.Path:
    subprocess.run(
        [sys.executable, "-m", "pip", "download", "--no-deps", "-q",
         "-d", str(dest), "recbole==1.2.1"],
        check=True)
    return next(dest.glob("recbole-*.whl"))


def rows(z: zipfile.ZipFile, kind: str):
    text = z.read(PREFIX + kind).decode("utf-8")
    lines = text.splitlines()
    return [line.split("\t") for line in lines[1:] if line]


def item_line(fields) -> str:
    item_id, title, year, classes = fields
    flags = ["0"] * len(GENRES)
    for name in classes.split(" "):
        flags[GENRES.index(name)] = "1"
    if title == "unkonwn":
        return "|".join([item_id, "unknown", "", "", ""] + flags)
    if year.isdigit():
        full = f"{title} ({year})"
        date = f"01-Jan-{year}"
    else:
        # one direct-to-video title keeps its year inside the title column
        full = f"{title} ({year})"
        date = ""
        if "(" in title:
            date = "01-Jan-" + title.rsplit("(", 1)[1].rstrip(")")
    url = "http://us.imdb.com/M/title-exact?" + urllib.parse.quote(full)
    return "|".join([item_id, full, date, "", url] + flags)


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="data/ml-100k")
    ap.add_argument("--wheel", help="use an already downloaded RecBole wheel")
    args = ap.parse_args()

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        wheel = pathlib.Path(args.wheel) if args.wheel else fetch_wheel(pathlib.Path(tmp))
        with zipfile.ZipFile(wheel) as z:
            inter = rows(z, "inter")
            items = rows(z, "item")
            users = rows(z, "user")

    with open(out / "u.data", "w", encoding="ascii", newline="\n") as f:
        for user, item, rating, ts in inter:
            f.write(f"{user}\t{item}\t{int(float(rating))}\t{int(float(ts))}\n")
    with open(out / "u.item", "w", encoding="latin-1", newline="\n") as f:
        for fields in sorted(items, key=lambda r: int(r[0])):
            f.write(item_line(fields) + "\n")
    with open(out / "u.user", "w", encoding="ascii", newline="\n") as f:
        for fields in sorted(users, key=lambda r: int(r[0])):
            f.write("|".join(fields) + "\n")
    print(f"wrote {len(inter)} ratings, {len(items)} items, {len(users)} users to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
