"""`plot --spec PATH` entry point."""

from __future__ import annotations

import argparse
import sys

from .figures import MissingColumnError, render_spec_file


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="plot",
                                     description="Render figures from benchmark CSV outputs")
    parser.add_argument("--spec", required=True, help="JSON figure spec (dict or list of dicts)")
    args = parser.parse_args(argv)
    try:
        results = render_spec_file(args.spec)
    except FileNotFoundError as err:
        print(f"missing file: {err}", file=sys.stderr)
        return 4
    except (MissingColumnError, ValueError) as err:
        print(f"bad figure spec: {err}", file=sys.stderr)
        return 3
    for res in results:
        print(f"wrote {res.path} ({res.kind})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
