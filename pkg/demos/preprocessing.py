"""Walk a small listening log through sessionization, skip labeling,
filtering and next-positive targets.

    python3 demos/preprocessing.py [LOG]
"""

import sys
from pathlib import Path

from skiprec.session_data import build_targets, ingest

DEFAULT_LOG = Path(__file__).resolve().parent.parent / "tests" / "fixtures" / "preprocessing_log.tsv"


def main(path):
    dataset = ingest(Path(path).read_bytes(), "raw-log")
    print(f"{len(dataset.sessions)} sessions, {dataset.vocab.num_items} tracks, "
          f"skip rate {dataset.skip_rate:.3f}\n")
    for n, session in enumerate(dataset.sessions):
        targets = build_targets(session)
        print(f"session {n} ({len(session)} events)")
        for t, (item, skipped) in enumerate(zip(session.items, session.skipped)):
            m = targets.next_positive[t]
            nxt = "-" if m is None else dataset.vocab.key(session.items[m])
            between = ",".join(dataset.vocab.key(session.items[j]) for j in targets.negatives_between[t])
            print(f"  {t:2d} {dataset.vocab.key(item):>8} {'skip' if skipped else '    '}"
                  f"  next positive {nxt:>8}  skipped in between [{between}]")
        print()


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else DEFAULT_LOG)
