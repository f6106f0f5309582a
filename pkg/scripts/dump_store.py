"""
Print a canonical dump of a store file, one object per line, sorted by token.

    python scripts/dump_store.py mo-store.db > before.txt

Two dumps of the same store contents are byte-identical, so restarts can be
checked with a plain diff.
"""
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from services.store import StoreFile  # noqa: E402


def dump(path: str) -> list[str]:
    store = StoreFile(path)
    try:
        lines = []
        for entry in store.load():
            part = entry.part
            lines.append(json.dumps({
                "token": part.token.hex(),
                "home": entry.home,
                "adopted_at": entry.adopted_at,
                "payload": part.payload.hex() if part.payload is not None else None,
                "cluster": [t.hex() for t in part.cluster],
                "policies": sorted(
                    (p.model_dump(mode="json") for p in entry.policies), key=lambda p: p["kind"],
                ),
            }, sort_keys=True))
        return lines
    finally:
        store.close()


if __name__ == "__main__":
    if len(sys.argv) != 2:
        print("usage: dump_store.py STORE_FILE", file=sys.stderr)
        sys.exit(2)
    for line in dump(sys.argv[1]):
        print(line)
