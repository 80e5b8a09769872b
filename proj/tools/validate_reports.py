#!/usr/bin/env python3
"""Validate serann report files against the JSON schemas in docs/schemas.

Each report's "kind" selects <kind>.schema.json. Exit status 0 iff all valid.
"""
import argparse
import json
import pathlib
import sys

import jsonschema


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--schemas", type=pathlib.Path,
                        default=pathlib.Path(__file__).resolve().parent.parent / "docs" / "schemas")
    parser.add_argument("reports", nargs="+", type=pathlib.Path)
    args = parser.parse_args(argv)

    failed = 0
    for path in args.reports:
        try:
            report = json.loads(path.read_text())
            schema = json.loads((args.schemas / f"{report['kind']}.schema.json").read_text())
            jsonschema.validate(report, schema, cls=jsonschema.Draft202012Validator)
            print(f"{path}: valid {report['kind']}")
        except (OSError, KeyError, TypeError, json.JSONDecodeError, jsonschema.ValidationError) as e:
            failed += 1
            print(f"{path}: INVALID: {e}", file=sys.stderr)
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
