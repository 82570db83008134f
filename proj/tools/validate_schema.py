#!/usr/bin/env python3
"""Validate JSON documents against a JSON schema.

usage: validate_schema.py SCHEMA DOC [DOC ...]

A DOC of "-" reads standard input. Files with several JSON values, one per
line, are validated line by line. Exit status 0 when every document passes.
"""
import argparse
import json
import sys

import jsonschema


def documents(path):
    text = sys.stdin.read() if path == "-" else open(path, encoding="utf-8").read()
    try:
        yield json.loads(text)
    except json.JSONDecodeError:
        for line in text.splitlines():
            if line.strip():
                yield json.loads(line)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("schema")
    ap.add_argument("docs", nargs="+")
    args = ap.parse_args()
    with open(args.schema, encoding="utf-8") as f:
        schema = json.load(f)
    cls = jsonschema.validators.validator_for(schema)
    cls.check_schema(schema)
    validator = cls(schema)
    failures = 0
    for path in args.docs:
        for n, doc in enumerate(documents(path)):
            errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.path))
            for e in errors:
                loc = "/".join(str(p) for p in e.path) or "<root>"
                print(f"{path}[{n}] {loc}: {e.message}", file=sys.stderr)
            failures += bool(errors)
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
