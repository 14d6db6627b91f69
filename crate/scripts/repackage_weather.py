#!/usr/bin/env python3
"""Repackage per-city daily weather files into the long-form CSV read by
`wxnet ingest`: header `date,city,<18 feature columns>`.

Each input file holds one city; the city name is taken from the file stem
(`Paris.csv` -> `Paris`). Column headers are normalized (lowercase, runs of
non-alphanumerics -> `_`, unit suffixes in parentheses dropped) and can be
renamed further with --rename old=new.

    python scripts/repackage_weather.py raw_dir/ -o weather.csv
    python scripts/repackage_weather.py raw_dir/*.csv -o weather.csv --rename temp_avg=avg_temp
"""

import argparse
import re
import sys
from pathlib import Path

import pandas as pd

FEATURES = [
    "high_temp",
    "low_temp",
    "avg_temp",
    "dew_point",
    "high_dew_point",
    "low_dew_point",
    "avg_dew_point",
    "max_wind_speed",
    "visibility",
    "sea_level_pressure",
    "observed_temp",
    "observed_dew_point",
    "humidity",
    "wind_direction",
    "wind_speed",
    "wind_gust",
    "pressure",
    "condition",
]


def normalize(name: str) -> str:
    name = re.sub(r"\(.*?\)", "", name)
    return re.sub(r"[^0-9a-z]+", "_", name.strip().lower()).strip("_")


def input_files(paths):
    for p in map(Path, paths):
        if p.is_dir():
            yield from sorted(p.glob("*.csv"))
        else:
            yield p


def load_city(path: Path, renames: dict, date_column: str) -> pd.DataFrame:
    frame = pd.read_csv(path)
    frame.columns = [normalize(c) for c in frame.columns]
    frame = frame.rename(columns=renames)
    if date_column not in frame.columns:
        raise SystemExit(f"{path}: no '{date_column}' column (have: {', '.join(frame.columns)})")
    missing = [f for f in FEATURES if f not in frame.columns]
    if missing:
        raise SystemExit(f"{path}: missing feature columns {', '.join(missing)}; map them with --rename")
    frame["date"] = pd.to_datetime(frame[date_column]).dt.strftime("%Y-%m-%d")
    frame["city"] = path.stem
    return frame[["date", "city", *FEATURES]]


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("inputs", nargs="+", help="per-city CSV files or directories of them")
    ap.add_argument("-o", "--out", required=True, type=Path)
    ap.add_argument("--rename", action="append", default=[], metavar="OLD=NEW",
                    help="rename a normalized column before selection (repeatable)")
    ap.add_argument("--date-column", default="date")
    args = ap.parse_args(argv)

    renames = {}
    for item in args.rename:
        old, sep, new = item.partition("=")
        if not sep:
            ap.error(f"--rename expects OLD=NEW, got {item!r}")
        renames[normalize(old)] = normalize(new)

    files = list(input_files(args.inputs))
    if not files:
        ap.error("no CSV files found")
    frames = [load_city(p, renames, normalize(args.date_column)) for p in files]
    out = pd.concat(frames, ignore_index=True).sort_values(["date", "city"], kind="stable")
    out.to_csv(args.out, index=False)
    print(f"{len(files)} cities, {out['date'].nunique()} days, {len(out)} rows -> {args.out}", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
