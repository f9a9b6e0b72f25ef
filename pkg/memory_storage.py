import copy
import logging
from typing import Dict, List, Optional, Tuple

logger = logging.getLogger(__name__)


class MemoryStorage:
    """Volatile storage backend for simulated peers and tests"""

    def __init__(self):
        self.state: Dict[str, object] = {}
        self.journal: List[str] = []

    def _get_storage_key(self, kind: str, path: str = '', version: int = 0) -> str:
        """Get a namespaced storage key"""
        return f"ddnfs:{kind}:{path}:{version}"

    def write_content(self, path: str, version: int, content: bytes):
        self.state[self._get_storage_key('content', path, version)] = bytes(content)

    def write_block(self, path: str, version: int, block_bytes: bytes):
        self.state[self._get_storage_key('sig', path, version)] = bytes(block_bytes)

    def write_meta(self, path: str, version: int, meta: dict):
        self.state[self._get_storage_key('meta', path, version)] = dict(meta)

    def append_journal(self, line: str):
        self.journal.append(line)

    def read_journal(self) -> List[str]:
        return list(self.journal)

    def read_document(self, path: str, version: int) -> Optional[Tuple[bytes, Optional[bytes], dict]]:
        content = self.state.get(self._get_storage_key('content', path, version))
        if content is None:
            return None
        block_bytes = self.state.get(self._get_storage_key('sig', path, version))
        meta = self.state.get(self._get_storage_key('meta', path, version), {})
        return content, block_bytes, dict(meta)

    def list_stored(self) -> List[Tuple[str, int]]:
        stored = []
        for key in self.state:
            _, kind, rest = key.split(':', 2)
            if kind != 'content':
                continue
            path, version = rest.rsplit(':', 1)
            stored.append((path, int(version)))
        return sorted(stored)

    def remove(self, path: str, version: int):
        for kind in ('content', 'sig', 'meta'):
            self.state.pop(self._get_storage_key(kind, path, version), None)
        logger.debug(f"Dropped {path}@{version} from memory")

    def save_json(self, name: str, data):
        self.state[self._get_storage_key('json', name)] = copy.deepcopy(data)

    def load_json(self, name: str, default=None):
        data = self.state.get(self._get_storage_key('json', name))
        return copy.deepcopy(data) if data is not None else default
