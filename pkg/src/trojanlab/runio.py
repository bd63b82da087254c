"""
Run Artifacts
=============

Workspace paths, content hashes, run manifests and result tables shared by
the command-line subcommands.
"""

import csv
import hashlib
import json
import logging
import os
import platform
from dataclasses import asdict, dataclass, field
from datetime import datetime
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from trojanlab import __version__
from trojanlab.errors import FormatError
from trojanlab.evaluation import run_cp

logger = logging.getLogger(__name__)

HOME_VARIABLE = 'TROJANLAB_HOME'
MANIFEST_NAME = 'manifest.json'


def workspace_root() -> str:
    return os.environ.get(HOME_VARIABLE) or os.getcwd()


def resolve_path(path: str) -> str:
    """Absolute path; relative paths are taken from the workspace root."""
    path = os.path.expanduser(path)
    if os.path.isabs(path):
        return path
    return os.path.join(workspace_root(), path)


def ensure_parent(path: str) -> str:
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    return path


def content_hash(path: str) -> str:
    """Git-style blob hash of a file."""
    with open(path, 'rb') as f:
        data = f.read()
    return hashlib.sha1(b'blob %d\0' % len(data) + data).hexdigest()


def json_hash(value) -> str:
    return hashlib.sha1(json.dumps(value, sort_keys=True).encode('utf-8')).hexdigest()


@dataclass
class RunManifest:
    """What a run was asked to do, what it read and what it wrote."""

    command: str
    config: Dict = field(default_factory=dict)
    inputs: Dict[str, str] = field(default_factory=dict)
    outputs: Dict[str, str] = field(default_factory=dict)
    seeds: List[int] = field(default_factory=list)
    version: str = __version__
    timings: Dict[str, float] = field(default_factory=dict)
    status: str = 'ok'
    result: Dict = field(default_factory=dict)
    created: str = ''
    host: str = ''

    def add_input(self, path: str) -> None:
        self.inputs[os.path.abspath(path)] = content_hash(path)

    def add_output(self, path: str) -> None:
        self.outputs[os.path.abspath(path)] = content_hash(path)

    def write(self, path: str) -> None:
        self.created = self.created or datetime.now().strftime('%Y-%m-%d %H:%M:%S')
        self.host = self.host or platform.node()
        ensure_parent(path)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(asdict(self), f, indent=2, sort_keys=True)
        logger.info(f"Wrote manifest {path}")

    @classmethod
    def load(cls, path: str) -> 'RunManifest':
        try:
            with open(path, 'r', encoding='utf-8') as f:
                return cls(**json.load(f))
        except (ValueError, TypeError) as e:
            raise FormatError(f"{path}: bad manifest ({e})") from None

    def verify_outputs(self) -> List[str]:
        """Paths whose current content no longer matches the recorded hash."""
        return [p for p, h in self.outputs.items() if not os.path.exists(p) or content_hash(p) != h]


def write_csv(path: str, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    ensure_parent(path)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow(list(row))


def read_csv(path: str) -> List[Dict[str, str]]:
    with open(path, 'r', newline='', encoding='utf-8') as f:
        return list(csv.DictReader(f))


# ---------------------------------------------------------------------------
# Results tables
# ---------------------------------------------------------------------------

KEY_COLUMNS = ('env', 'arch', 'attack', 'target_kind', 'budget')
TABLE_COLUMNS = KEY_COLUMNS + ('seed', 'asr', 'btp', 'cp', 'status')


class ResultsTable:
    """
    Per-run metric rows plus aggregate rows over seeds.

    Aggregate CP is the mean of the per-run CP values.
    """

    def __init__(self, rows: Optional[List[Dict]] = None):
        self.rows: List[Dict] = list(rows or [])

    def add(self, row: Dict) -> None:
        missing = [c for c in TABLE_COLUMNS if c not in row]
        if missing:
            raise FormatError(f"result row is missing columns {missing}")
        self.rows.append({c: row[c] for c in TABLE_COLUMNS})

    def ok_rows(self) -> List[Dict]:
        return [r for r in self.rows if r['status'] == 'ok']

    def aggregates(self) -> List[Dict]:
        groups: Dict[tuple, List[Dict]] = {}
        for row in self.ok_rows():
            groups.setdefault(tuple(row[c] for c in KEY_COLUMNS), []).append(row)
        out = []
        for key in sorted(groups, key=lambda k: tuple(str(v) for v in k)):
            rows = groups[key]
            record = dict(zip(KEY_COLUMNS, key))
            record.update(
                seed='mean',
                asr=float(np.mean([float(r['asr']) for r in rows])),
                btp=float(np.mean([float(r['btp']) for r in rows])),
                cp=float(np.mean([run_cp(float(r['asr']), float(r['btp'])) for r in rows])),
                status=f'n={len(rows)}',
            )
            out.append(record)
        return out

    def all_rows(self) -> List[Dict]:
        return self.rows + self.aggregates()

    def write_csv(self, path: str) -> None:
        write_csv(path, TABLE_COLUMNS, ([r[c] for c in TABLE_COLUMNS] for r in self.all_rows()))

    def to_text(self) -> str:
        def fmt(value) -> str:
            return f'{value:.3f}' if isinstance(value, float) else str(value)

        cells = [list(TABLE_COLUMNS)] + [[fmt(r[c]) for c in TABLE_COLUMNS] for r in self.all_rows()]
        widths = [max(len(row[i]) for row in cells) for i in range(len(TABLE_COLUMNS))]
        lines = ['  '.join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in cells]
        lines.insert(1, '  '.join('-' * w for w in widths))
        return '\n'.join(lines) + '\n'

    def write_text(self, path: str) -> None:
        ensure_parent(path)
        with open(path, 'w', encoding='utf-8') as f:
            f.write(self.to_text())

    @classmethod
    def from_csv(cls, path: str) -> 'ResultsTable':
        table = cls()
        for row in read_csv(path):
            if row.get('seed') == 'mean':
                continue
            for name in ('asr', 'btp', 'cp'):
                row[name] = float(row[name]) if row[name] not in ('', 'nan') else float('nan')
            table.rows.append({c: row.get(c, '') for c in TABLE_COLUMNS})
        return table
