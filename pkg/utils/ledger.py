"""
Stackcast Run Ledger
One JSON line per stage event in <out_dir>/ledger.jsonl, each hashed over its
own body and the previous line's hash
"""

import json
import hashlib
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional
import logging
import threading

import numpy as np

logger = logging.getLogger(__name__)

GENESIS_HASH = "0" * 64


def convert_to_serializable(obj):
    """Recursively convert numpy and path types to JSON-native values"""
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    if isinstance(obj, dict):
        return {str(key): convert_to_serializable(value) for key, value in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [convert_to_serializable(item) for item in obj]
    return obj


def entry_digest(entry: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON of every field except the digest itself"""
    body = {key: value for key, value in entry.items() if key != 'sha256'}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(',', ':')).encode('utf-8')).hexdigest()


class RunLedger:
    """Append-only stage ledger of one run directory; appends are serialised with a lock"""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.touch(exist_ok=True)
        self._lock = threading.Lock()

        entries = self.entries()
        self.seq = len(entries)
        self.last_hash = entries[-1].get('sha256', GENESIS_HASH) if entries else GENESIS_HASH

        broken = self.first_broken()
        if broken is not None:
            logger.warning(f"Ledger {self.path} is broken at line {broken}; new entries chain onto the last line")

    def entries(self) -> List[Dict[str, Any]]:
        """Parsed entries in file order; unreadable lines come back as empty dicts"""
        rows = []
        for line in self.path.read_text(encoding='utf-8').splitlines():
            if not line.strip():
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError:
                rows.append({})
        return rows

    def log(self, actor: str, action: str, payload: Dict[str, Any]) -> str:
        """Append one event and return its digest"""
        with self._lock:
            entry = {
                'seq': self.seq,
                'ts': datetime.now(timezone.utc).isoformat(),
                'actor': actor,
                'action': action,
                'payload': convert_to_serializable(payload),
                'prev_sha256': self.last_hash
            }
            entry['sha256'] = entry_digest(entry)

            with open(self.path, 'a', encoding='utf-8') as f:
                f.write(json.dumps(entry, separators=(',', ':')) + '\n')

            self.seq += 1
            self.last_hash = entry['sha256']
            logger.debug(f"Ledger #{entry['seq']}: {actor} {action}")
            return entry['sha256']

    def first_broken(self) -> Optional[int]:
        """1-based line of the first entry that breaks the chain, None when intact"""
        prev = GENESIS_HASH
        for line_no, entry in enumerate(self.entries(), start=1):
            if (entry.get('seq') != line_no - 1 or entry.get('prev_sha256') != prev
                    or entry.get('sha256') != entry_digest(entry)):
                return line_no
            prev = entry['sha256']
        return None
